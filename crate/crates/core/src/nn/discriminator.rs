use rand::Rng;

use super::arch::{receptive_field, ArchConfig};
use super::layers::{Conv2d, Padding};
use super::spectral::top_singular_value;
use crate::attention::AttentionBlock;
use crate::autodiff::{Tape, Var};
use crate::edge::edge_map;
use crate::error::{config_err, Result};
use crate::param::{Module, Param};

pub const LEAKY_SLOPE: f64 = 0.2;

/// PatchGAN stack: stride-2 convs, one stride-1 feature conv, attention
/// reweighting and a one-channel logit head.
#[derive(Clone, Debug)]
pub struct PatchStack {
    convs: Vec<Conv2d>,
    pub attention: AttentionBlock,
    head: Conv2d,
}

impl PatchStack {
    fn new<R: Rng + ?Sized>(name: &str, arch: &ArchConfig, downs: usize, rng: &mut R) -> Result<Self> {
        let mut convs = Vec::new();
        let mut in_ch = 4;
        for i in 0..=downs {
            let out = arch.disc_channels(i);
            let stride = if i < downs { 2 } else { 1 };
            convs.push(
                Conv2d::new(&format!("{name}.conv{i}"), in_ch, out, 4, stride, Padding::Zero(1), true, rng)
                    .with_spectral_norm(rng),
            );
            in_ch = out;
        }
        Ok(PatchStack {
            convs,
            attention: AttentionBlock::new(&format!("{name}.att"), in_ch, rng)?.with_spectral_norm(rng),
            head: Conv2d::new(&format!("{name}.head"), in_ch, 1, 4, 1, Padding::Zero(1), true, rng)
                .with_spectral_norm(rng),
        })
    }

    /// Returns `(logits, e_d)`.
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let maps = self.attention.maps(tape, h)?;
        let att = self.attention.combined(tape, maps)?;
        let c = tape.mul(h, att)?;
        Ok((self.head.forward(tape, c)?, h))
    }

    /// Receptive field of the feature path through the head.
    pub fn receptive_field(&self) -> usize {
        let layers: Vec<(usize, usize)> = self
            .convs
            .iter()
            .chain(std::iter::once(&self.head))
            .map(|c| (c.kernel(), c.stride))
            .collect();
        receptive_field(&layers)
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.convs
            .iter()
            .chain([&self.attention.v, &self.attention.pixel_conv, &self.head])
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.convs.iter_mut().chain([
            &mut self.attention.v,
            &mut self.attention.pixel_conv,
            &mut self.head,
        ])
    }
}

impl Module for PatchStack {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.convs.iter().for_each(|c| c.visit(f));
        self.attention.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.convs.iter_mut().for_each(|c| c.visit_mut(f));
        self.attention.visit_mut(f);
        self.head.visit_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param)) {
        self.convs.iter().for_each(|c| c.visit_buffers(f));
        self.attention.visit_buffers(f);
        self.head.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.convs.iter_mut().for_each(|c| c.visit_buffers_mut(f));
        self.attention.visit_buffers_mut(f);
        self.head.visit_buffers_mut(f);
    }
}

/// Two-scale discriminator fed with the image and its edge map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub arch: ArchConfig,
    pub local: PatchStack,
    pub global: PatchStack,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorOutput {
    pub local_logits: Var,
    pub global_logits: Var,
    /// Class-activation probability `[N,1]` from the local encoding.
    pub eta: Var,
    pub cam_map: Var,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(name: &str, arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        Ok(Discriminator {
            arch,
            local: PatchStack::new(&format!("{name}.local"), &arch, arch.d_local_down, rng)?,
            global: PatchStack::new(&format!("{name}.global"), &arch, arch.d_global_down, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<DiscriminatorOutput> {
        match *tape.shape(x) {
            [_, 3, _, _] => {}
            ref s => return Err(config_err!("discriminator input must be [N,3,H,W], got {s:?}")),
        }
        let edges = edge_map(tape, x, self.arch.edge_kernel)?;
        let x4 = tape.concat_channels(&[x, edges])?;
        let (local_logits, e_d) = self.local.forward(tape, x4)?;
        let (global_logits, _) = self.global.forward(tape, x4)?;
        let (eta, cam_map) = self.local.attention.cam(tape, e_d)?;
        Ok(DiscriminatorOutput {
            local_logits,
            global_logits,
            eta,
            cam_map,
        })
    }

    /// One power-iteration step for every spectrally normalized conv.
    pub fn power_iterate(&mut self) {
        self.local.convs_mut().chain(self.global.convs_mut()).for_each(|c| c.power_iterate());
    }

    /// Exact top singular value of every effective (normalized) conv weight.
    pub fn spectral_norms(&self) -> Vec<f64> {
        self.local
            .convs()
            .chain(self.global.convs())
            .map(|c| top_singular_value(&c.effective_weight()))
            .collect()
    }
}

impl Module for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.local.visit(f);
        self.global.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.local.visit_mut(f);
        self.global.visit_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param)) {
        self.local.visit_buffers(f);
        self.global.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.local.visit_buffers_mut(f);
        self.global.visit_buffers_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn run(d: &Discriminator, x: &Tensor) -> (Tensor, Tensor, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let o = d.forward(&mut tape, xv).unwrap();
        (
            tape.value(o.local_logits).clone(),
            tape.value(o.global_logits).clone(),
            tape.value(o.eta).clone(),
        )
    }

    #[test]
    fn grids_follow_receptive_field_arithmetic() {
        let arch = ArchConfig {
            d_base_channels: 2,
            ..ArchConfig::default()
        };
        let d = Discriminator::new("d", arch, &mut rng(0)).unwrap();
        assert_eq!(d.local.receptive_field(), 70);
        assert!(d.global.receptive_field() >= 256);
        let x = Tensor::uniform(&[1, 3, 256, 256], 0.0, 1.0, &mut rng(1));
        let (local, global, eta) = run(&d, &x);
        assert_eq!(local.shape(), &[1, 1, 30, 30]);
        assert_eq!(global.shape(), &[1, 1, 6, 6]);
        assert_eq!(eta.shape(), &[1, 1]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut d = Discriminator::new("d", ArchConfig::tiny(), &mut rng(2)).unwrap();
        d.visit_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let (local, global, eta) = run(&d, &Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(3)));
        assert!(local.data().iter().chain(global.data()).all(|&v| v == 0.0));
        assert_eq!(eta.data(), &[0.5]);
    }

    #[test]
    fn batch_order_is_respected() {
        let d = Discriminator::new("d", ArchConfig::tiny(), &mut rng(4)).unwrap();
        let a = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(5));
        let b = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(6));
        let cat = |p: &Tensor, q: &Tensor| {
            Tensor::new(&[2, 3, 8, 8], [p.data(), q.data()].concat()).unwrap()
        };
        let (l1, g1, e1) = run(&d, &cat(&a, &b));
        let (l2, g2, e2) = run(&d, &cat(&b, &a));
        let swap = |t: &Tensor| {
            let half = t.numel() / 2;
            Tensor::new(t.shape(), [&t.data()[half..], &t.data()[..half]].concat()).unwrap()
        };
        assert!(l1.max_abs_diff(&swap(&l2)).unwrap() < 1e-12);
        assert!(g1.max_abs_diff(&swap(&g2)).unwrap() < 1e-12);
        assert!(e1.max_abs_diff(&swap(&e2)).unwrap() < 1e-12);
    }

    #[test]
    fn every_conv_is_spectrally_normalized() {
        let d = Discriminator::new("d", ArchConfig::tiny(), &mut rng(7)).unwrap();
        let norms = d.spectral_norms();
        assert_eq!(norms.len(), 2 * (2 + 3));
        for s in norms {
            assert!((s - 1.0).abs() < 0.05, "{s}");
        }
        let mut buffers = 0;
        d.visit_buffers(&mut |_| buffers += 1);
        assert_eq!(buffers, 10);
    }
}
