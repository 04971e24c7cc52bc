use rand::Rng;

use super::arch::ArchConfig;
use super::layers::{adalin, flatten_pooled, Conv2d, InstanceNorm, LayerInstanceNorm, Linear, Padding, Rho};
use crate::attention::{residual_blend, AttentionBlock};
use crate::autodiff::{PoolMode, Tape, Var};
use crate::edge::edge_map;
use crate::error::{config_err, Result};
use crate::param::{Module, Param};

/// Initial instance/layer ratio of the decoder residual blocks.
pub const ADALIN_RHO_INIT: f64 = 0.9;

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(name: &str, c: usize, rng: &mut R) -> Self {
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), c, c, 3, 1, Padding::Reflect(1), false, rng),
            norm1: InstanceNorm::new(&format!("{name}.norm1"), c),
            conv2: Conv2d::new(&format!("{name}.conv2"), c, c, 3, 1, Padding::Reflect(1), false, rng),
            norm2: InstanceNorm::new(&format!("{name}.norm2"), c),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.norm1.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let h = self.norm2.forward(tape, h)?;
        tape.add(x, h)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.norm1.visit(f);
        self.conv2.visit(f);
        self.norm2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.norm1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.norm2.visit_mut(f);
    }
}

/// Downsampling convs followed by residual blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    down: Vec<(Conv2d, InstanceNorm)>,
    res: Vec<ResBlock>,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(name: &str, arch: &ArchConfig, rng: &mut R) -> Self {
        let mut in_ch = 3;
        let mut down = Vec::new();
        for i in 0..arch.n_down {
            let out = arch.encoder_channels(i);
            down.push((
                Conv2d::new(&format!("{name}.down{i}"), in_ch, out, 4, 2, Padding::Reflect(1), false, rng),
                InstanceNorm::new(&format!("{name}.down{i}.norm"), out),
            ));
            in_ch = out;
        }
        let res = (0..arch.n_res_blocks)
            .map(|i| ResBlock::new(&format!("{name}.res{i}"), in_ch, rng))
            .collect();
        Encoder { down, res }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, norm) in &self.down {
            h = conv.forward(tape, h)?;
            h = norm.forward(tape, h)?;
            h = tape.relu(h)?;
        }
        for block in &self.res {
            h = block.forward(tape, h)?;
        }
        Ok(h)
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for (c, n) in &self.down {
            c.visit(f);
            n.visit(f);
        }
        self.res.iter().for_each(|b| b.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (c, n) in &mut self.down {
            c.visit_mut(f);
            n.visit_mut(f);
        }
        self.res.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

#[derive(Clone, Debug)]
struct AdaLinResBlock {
    conv1: Conv2d,
    rho1: Rho,
    conv2: Conv2d,
    rho2: Rho,
}

impl AdaLinResBlock {
    fn new<R: Rng + ?Sized>(name: &str, c: usize, rng: &mut R) -> Self {
        AdaLinResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), c, c, 3, 1, Padding::Reflect(1), false, rng),
            rho1: Rho::new(&format!("{name}.norm1"), c, ADALIN_RHO_INIT),
            conv2: Conv2d::new(&format!("{name}.conv2"), c, c, 3, 1, Padding::Reflect(1), false, rng),
            rho2: Rho::new(&format!("{name}.norm2"), c, ADALIN_RHO_INIT),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let r1 = tape.param(&self.rho1.rho)?;
        let h = adalin(tape, h, r1, gamma, beta)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let r2 = tape.param(&self.rho2.rho)?;
        let h = adalin(tape, h, r2, gamma, beta)?;
        tape.add(x, h)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        f(&self.rho1.rho);
        self.conv2.visit(f);
        f(&self.rho2.rho);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        f(&mut self.rho1.rho);
        self.conv2.visit_mut(f);
        f(&mut self.rho2.rho);
    }
}

/// AdaLIN residual blocks, nearest-neighbour upsampling and the output conv.
#[derive(Clone, Debug)]
pub struct Decoder {
    fc: Linear,
    gamma: Linear,
    beta: Linear,
    res: Vec<AdaLinResBlock>,
    up: Vec<(Conv2d, LayerInstanceNorm)>,
    out: Conv2d,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(name: &str, arch: &ArchConfig, rng: &mut R) -> Self {
        let c = arch.latent_channels();
        let res = (0..arch.n_res_blocks)
            .map(|i| AdaLinResBlock::new(&format!("{name}.res{i}"), c, rng))
            .collect();
        let mut up = Vec::new();
        let mut in_ch = c;
        for j in 0..arch.n_down {
            let out = if j + 1 < arch.n_down {
                arch.encoder_channels(arch.n_down - 2 - j)
            } else {
                arch.base_channels
            };
            up.push((
                Conv2d::new(&format!("{name}.up{j}"), in_ch, out, 3, 1, Padding::Reflect(1), false, rng),
                LayerInstanceNorm::new(&format!("{name}.up{j}.norm"), out),
            ));
            in_ch = out;
        }
        Decoder {
            fc: Linear::new(&format!("{name}.fc"), c, c, rng),
            gamma: Linear::new(&format!("{name}.gamma"), c, c, rng),
            beta: Linear::new(&format!("{name}.beta"), c, c, rng),
            res,
            up,
            out: Conv2d::new(&format!("{name}.out"), in_ch, 3, 3, 1, Padding::Reflect(1), true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, e_ro: Var) -> Result<Var> {
        let (n, c) = (tape.shape(e_ro)[0], tape.shape(e_ro)[1]);
        let pooled = tape.pool_global(e_ro, PoolMode::Avg)?;
        let rows = flatten_pooled(tape, pooled)?;
        let h = self.fc.forward(tape, rows)?;
        let h = tape.relu(h)?;
        let gamma = self.gamma.forward(tape, h)?;
        let gamma = tape.reshape(gamma, &[n, c, 1, 1])?;
        let beta = self.beta.forward(tape, h)?;
        let beta = tape.reshape(beta, &[n, c, 1, 1])?;

        let mut x = e_ro;
        for block in &self.res {
            x = block.forward(tape, x, gamma, beta)?;
        }
        for (conv, norm) in &self.up {
            x = tape.upsample2x(x)?;
            x = conv.forward(tape, x)?;
            x = norm.forward(tape, x)?;
            x = tape.relu(x)?;
        }
        let x = self.out.forward(tape, x)?;
        let t = tape.tanh(x)?;
        let t = tape.add_scalar(t, 1.0)?;
        tape.mul_scalar(t, 0.5)
    }

    fn clamp_rho(&mut self) {
        for b in &mut self.res {
            b.rho1.clamp();
            b.rho2.clamp();
        }
        for (_, n) in &mut self.up {
            n.rho.clamp();
        }
    }
}

impl Module for Decoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.fc.visit(f);
        self.gamma.visit(f);
        self.beta.visit(f);
        self.res.iter().for_each(|b| b.visit(f));
        for (c, n) in &self.up {
            c.visit(f);
            n.visit(f);
        }
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc.visit_mut(f);
        self.gamma.visit_mut(f);
        self.beta.visit_mut(f);
        self.res.iter_mut().for_each(|b| b.visit_mut(f));
        for (c, n) in &mut self.up {
            c.visit_mut(f);
            n.visit_mut(f);
        }
        self.out.visit_mut(f);
    }
}

/// Two-branch enhancement generator: image and edge encodings share one
/// encoder, are summed, reweighted by attention and decoded.
#[derive(Clone, Debug)]
pub struct Generator {
    pub arch: ArchConfig,
    pub encoder: Encoder,
    pub attention: AttentionBlock,
    pub decoder: Decoder,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    /// Enhanced image in `[0,1]`, same shape as the input.
    pub image: Var,
    pub pixel_att: Var,
    pub channel_att: Var,
    /// Class-activation probability `[N,1]`.
    pub eta: Var,
    pub cam_map: Var,
    pub edges: Var,
    pub image_encoding: Var,
    pub edge_encoding: Var,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(name: &str, arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        Ok(Generator {
            arch,
            encoder: Encoder::new(&format!("{name}.enc"), &arch, rng),
            attention: AttentionBlock::new(&format!("{name}.att"), arch.latent_channels(), rng)?,
            decoder: Decoder::new(&format!("{name}.dec"), &arch, rng),
        })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let factor = 1usize << self.arch.n_down;
        match *tape.shape(x) {
            [_, 3, h, w] if h % factor == 0 && w % factor == 0 && h >= 2 * factor && w >= 2 * factor => Ok(()),
            ref s => Err(config_err!(
                "generator input must be [N,3,H,W] with H,W multiples of {factor} and at least {}, got {s:?}",
                2 * factor
            )),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<GeneratorOutput> {
        self.check_input(tape, x)?;
        let image_encoding = self.encoder.forward(tape, x)?;
        let edges = edge_map(tape, x, self.arch.edge_kernel)?;
        let edges3 = tape.concat_channels(&[edges, edges, edges])?;
        let edge_encoding = self.encoder.forward(tape, edges3)?;
        let fused = tape.add(image_encoding, edge_encoding)?;

        let maps = self.attention.maps(tape, fused)?;
        let att = self.attention.combined(tape, maps)?;
        let lambda = tape.param(&self.attention.lambda)?;
        let e_ro = residual_blend(tape, fused, att, lambda)?;
        let (eta, cam_map) = self.attention.cam(tape, fused)?;
        let image = self.decoder.forward(tape, e_ro)?;
        Ok(GeneratorOutput {
            image,
            pixel_att: maps.pixel,
            channel_att: maps.channel,
            eta,
            cam_map,
            edges,
            image_encoding,
            edge_encoding,
        })
    }

    /// Projects every AdaLIN / LIN ratio back into `[0,1]`.
    pub fn clamp_rho(&mut self) {
        self.decoder.clamp_rho();
    }
}

impl Module for Generator {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.attention.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.attention.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}
