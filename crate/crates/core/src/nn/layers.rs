use rand::Rng;

use super::spectral::SpectralNorm;
use crate::autodiff::{NormKind, Tape, Var};
use crate::error::{contract_err, Result};
use crate::param::{Module, Param};
use crate::Tensor;

/// Variance floor shared by every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: Padding,
    pub spectral: Option<SpectralNorm>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            fan_in_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), fan_in_uniform(&[out_ch], fan_in, rng)));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
            spectral: None,
        }
    }

    /// Wraps the weight in spectral normalization.
    pub fn with_spectral_norm<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        let name = self.weight.name().trim_end_matches(".weight").to_string();
        self.spectral = Some(SpectralNorm::new(&name, &self.weight.value, rng));
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut w = tape.param(&self.weight)?;
        if let Some(sn) = &self.spectral {
            w = sn.apply(tape, w)?;
        }
        let b = match &self.bias {
            Some(b) => Some(tape.param(b)?),
            None => None,
        };
        match self.padding {
            Padding::Zero(p) => tape.conv2d(x, w, b, self.stride, p),
            Padding::Reflect(0) => tape.conv2d(x, w, b, self.stride, 0),
            Padding::Reflect(p) => {
                let x = tape.reflect_pad(x, p)?;
                tape.conv2d(x, w, b, self.stride, 0)
            }
        }
    }

    /// Weight actually used by the forward pass.
    pub fn effective_weight(&self) -> Tensor {
        match &self.spectral {
            Some(sn) => {
                let sigma = sn.sigma(&self.weight.value).max(super::spectral::SIGMA_FLOOR);
                self.weight.value.map(|v| v / sigma)
            }
            None => self.weight.value.clone(),
        }
    }

    /// One power-iteration step on the spectral state, if any.
    pub fn power_iterate(&mut self) {
        if let Some(sn) = &mut self.spectral {
            sn.power_iterate(&self.weight.value, 1);
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(sn) = &self.spectral {
            f(&sn.u);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(sn) = &mut self.spectral {
            f(&mut sn.u);
        }
    }
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), fan_in_uniform(&[inputs, outputs], inputs, rng)),
            bias: Param::new(format!("{name}.bias"), fan_in_uniform(&[1, outputs], inputs, rng)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight)?;
        let b = tape.param(&self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

fn affine(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let y = tape.mul(x, gamma)?;
    tape.add(y, beta)
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` with per-sample,
/// per-channel statistics.
pub fn instance_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.normalize(x, NormKind::Instance, NORM_EPS)?;
    affine(tape, n, gamma, beta)
}

/// Like [`instance_norm`] but with statistics over channels and space.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.normalize(x, NormKind::Layer, NORM_EPS)?;
    affine(tape, n, gamma, beta)
}

/// `rho * IN(x) + (1 - rho) * LN(x)`, then `* gamma + beta`.
pub fn adalin(tape: &mut Tape, x: Var, rho: Var, gamma: Var, beta: Var) -> Result<Var> {
    let inst = tape.normalize(x, NormKind::Instance, NORM_EPS)?;
    let layer = tape.normalize(x, NormKind::Layer, NORM_EPS)?;
    let diff = tape.sub(inst, layer)?;
    let mix = tape.mul(rho, diff)?;
    let blended = tape.add(layer, mix)?;
    affine(tape, blended, gamma, beta)
}

fn channel_param(name: String, c: usize, value: f64) -> Param {
    Param::new(name, Tensor::full(&[1, c, 1, 1], value))
}

/// Instance normalization with learned per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: channel_param(format!("{name}.gamma"), channels, 1.0),
            beta: channel_param(format!("{name}.beta"), channels, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma)?;
        let b = tape.param(&self.beta)?;
        instance_norm(tape, x, g, b)
    }
}

impl Module for InstanceNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Learned per-channel instance/layer blend ratio.
#[derive(Clone, Debug)]
pub struct Rho {
    pub rho: Param,
}

impl Rho {
    pub fn new(name: &str, channels: usize, init: f64) -> Self {
        Rho {
            rho: channel_param(format!("{name}.rho"), channels, init),
        }
    }

    /// Projects the ratio back into `[0, 1]`.
    pub fn clamp(&mut self) {
        self.rho.value.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Instance/layer blend with its own learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerInstanceNorm {
    pub rho: Rho,
    pub gamma: Param,
    pub beta: Param,
}

impl LayerInstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        LayerInstanceNorm {
            rho: Rho::new(name, channels, 0.0),
            gamma: channel_param(format!("{name}.gamma"), channels, 1.0),
            beta: channel_param(format!("{name}.beta"), channels, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let r = tape.param(&self.rho.rho)?;
        let g = tape.param(&self.gamma)?;
        let b = tape.param(&self.beta)?;
        adalin(tape, x, r, g, b)
    }
}

impl Module for LayerInstanceNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.rho.rho);
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.rho.rho);
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// `[N,C,1,1] -> [N,C]`.
pub fn flatten_pooled(tape: &mut Tape, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [n, c, 1, 1] => tape.reshape(x, &[n, c]),
        ref s => Err(contract_err!("expected pooled [N,C,1,1], got {s:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Two-pass mean and biased variance over each group of `group` values.
    fn oracle_norm(x: &Tensor, group: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for g in x.data().chunks(group) {
            let mean = g.iter().sum::<f64>() / group as f64;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group as f64;
            out.extend(g.iter().map(|v| (v - mean) / (var + NORM_EPS).sqrt()));
        }
        out
    }

    fn run_norm(x: &Tensor, rho: Option<&Tensor>, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let g = tape.constant(gamma.clone()).unwrap();
        let b = tape.constant(beta.clone()).unwrap();
        let y = match rho {
            Some(r) => {
                let r = tape.constant(r.clone()).unwrap();
                adalin(&mut tape, xv, r, g, b).unwrap()
            }
            None => instance_norm(&mut tape, xv, g, b).unwrap(),
        };
        tape.value(y).clone()
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let x = Tensor::uniform(&[2, 3, 5, 4], -12.0, 13.0, &mut rng(0));
        let y = run_norm(&x, None, &Tensor::ones(&[1, 3, 1, 1]), &Tensor::zeros(&[1, 3, 1, 1]));
        for g in y.data().chunks(20) {
            let mean = g.iter().sum::<f64>() / 20.0;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let want = oracle_norm(&x, 20);
        assert!(y.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full(&[1, 2, 3, 3], 0.7);
        let beta = Tensor::new(&[1, 2, 1, 1], vec![0.25, -1.5]).unwrap();
        let y = run_norm(&x, None, &Tensor::full(&[1, 2, 1, 1], 3.0), &beta);
        assert!(y.data()[..9].iter().all(|&v| (v - 0.25).abs() < 1e-10));
        assert!(y.data()[9..].iter().all(|&v| (v + 1.5).abs() < 1e-10));
    }

    #[test]
    fn one_pixel_input_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 1, 1])).unwrap();
        let g = tape.constant(Tensor::ones(&[1, 4, 1, 1])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1, 4, 1, 1])).unwrap();
        assert!(matches!(
            instance_norm(&mut tape, x, g, b),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn adalin_endpoints_and_midpoint() {
        let mut r = rng(1);
        let x = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
        let gamma = Tensor::uniform(&[1, 3, 1, 1], 0.5, 1.5, &mut r);
        let beta = Tensor::uniform(&[1, 3, 1, 1], -0.5, 0.5, &mut r);
        let inst = oracle_norm(&x, 16);
        let layer = oracle_norm(&x, 48);
        let expect = |mix: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..48).map(|i| mix(i) * gamma.data()[i / 16] + beta.data()[i / 16]).collect()
        };
        for (rho, mix) in [
            (1.0, Box::new(|i: usize| inst[i]) as Box<dyn Fn(usize) -> f64>),
            (0.0, Box::new(|i: usize| layer[i])),
            (0.5, Box::new(|i: usize| 0.5 * (inst[i] + layer[i]))),
        ] {
            let y = run_norm(&x, Some(&Tensor::full(&[1, 3, 1, 1], rho)), &gamma, &beta);
            let want = expect(&mix);
            let err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "rho {rho}: {err}");
        }
        let inorm = run_norm(&x, None, &gamma, &beta);
        let rho1 = run_norm(&x, Some(&Tensor::ones(&[1, 3, 1, 1])), &gamma, &beta);
        assert!(inorm.max_abs_diff(&rho1).unwrap() < 1e-12);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut r = rng(2);
        let conv = Conv2d::new("c", 2, 3, 4, 2, Padding::Reflect(1), true, &mut r);
        let sn_conv = Conv2d::new("s", 2, 3, 4, 2, Padding::Zero(1), true, &mut r).with_spectral_norm(&mut r);
        let lin = Linear::new("l", 6, 4, &mut r);
        let lin_norm = LayerInstanceNorm::new("n", 2);
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let img = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut r);
            let probe = Tensor::uniform(&[1, 3, 3, 3], -1.0, 1.0, &mut r);
            let err = grad_check(
                |t, x| {
                    let a = conv.forward(t, x)?;
                    let b = sn_conv.forward(t, x)?;
                    let s = t.add(a, b)?;
                    let p = t.constant(probe.clone())?;
                    let m = t.mul(s, p)?;
                    t.sum(m)
                },
                &img,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "conv input: {err}");

            let w0 = sn_conv.weight.value.clone();
            let err = grad_check(
                |t, w| {
                    t.bind(&sn_conv.weight, w);
                    let x = t.constant(img.clone())?;
                    let y = sn_conv.forward(t, x)?;
                    let p = t.constant(probe.clone())?;
                    let m = t.mul(y, p)?;
                    t.sum(m)
                },
                &w0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "spectral weight: {err}");

            let rows = Tensor::uniform(&[2, 6], -1.0, 1.0, &mut r);
            let err = grad_check(
                |t, x| {
                    let y = lin.forward(t, x)?;
                    let y = t.tanh(y)?;
                    t.sum(y)
                },
                &rows,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "linear: {err}");

            let rho = Tensor::uniform(&[1, 2, 1, 1], 0.0, 1.0, &mut r);
            let probe2 = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
            let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
            let err = grad_check(
                |t, rv| {
                    t.bind(&lin_norm.rho.rho, rv);
                    let xv = t.constant(x.clone())?;
                    let y = lin_norm.forward(t, xv)?;
                    let p = t.constant(probe2.clone())?;
                    let m = t.mul(y, p)?;
                    t.sum(m)
                },
                &rho,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "rho: {err}");
            let err = grad_check(
                |t, xv| {
                    let y = lin_norm.forward(t, xv)?;
                    let p = t.constant(probe2.clone())?;
                    let m = t.mul(y, p)?;
                    t.sum(m)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "adalin input: {err}");
        }
    }

    #[test]
    fn rho_clamp_projects_into_unit_interval() {
        let mut r = Rho::new("r", 3, 0.5);
        r.rho.value = Tensor::new(&[1, 3, 1, 1], vec![-0.2, 0.4, 1.7]).unwrap();
        r.clamp();
        assert_eq!(r.rho.value.data(), &[0.0, 0.4, 1.0]);
    }
}
