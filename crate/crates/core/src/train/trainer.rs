use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_module, push_module, round_to_f32, Checkpoint};
use super::config::TrainConfig;
use crate::attention::normalize_for_display;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::{Augmenter, ImageBuffer, Prefetcher, UnpairedDataset};
use crate::losses::{
    adversarial_value, auxiliary_loss, cycle_loss, generator_adversarial, identity_loss,
    structural_loss, total_loss, total_loss_var, LossBundle,
};
use crate::nn::{ArchConfig, Discriminator, Generator};
use crate::optim::{collect_grads, AdaBound};
use crate::param::{Module, Param, ParamId};
use crate::Tensor;

/// RNG stream reserved for weight initialization; iteration streams use the
/// iteration index.
const INIT_STREAM: u64 = u64::MAX;

pub const LOG_HEADER: &str = "iteration,l_str,l_idt,l_adv,l_cyc,l_aux,l_all";

const D_PASSES_PER_PHASE: usize = 2;

/// Two modules walked as one, first then second.
pub struct Pair<'a, M: Module>(pub &'a mut M, pub &'a mut M);

impl<M: Module> Module for Pair<'_, M> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.0.visit(f);
        self.1.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.0.visit_mut(f);
        self.1.visit_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param)) {
        self.0.visit_buffers(f);
        self.1.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.0.visit_buffers_mut(f);
        self.1.visit_buffers_mut(f);
    }
}

fn round_module(m: &mut dyn Module) {
    m.visit_mut(&mut |p| round_to_f32(&mut p.value));
    m.visit_buffers_mut(&mut |p| round_to_f32(&mut p.value));
}

/// Low-to-normal (`g_ab`) and normal-to-low (`g_ba`) generators with one
/// discriminator per domain.
#[derive(Clone, Debug)]
pub struct Leugan {
    pub arch: ArchConfig,
    pub g_ab: Generator,
    pub g_ba: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
}

impl Leugan {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut m = Leugan {
            arch,
            g_ab: Generator::new("g_ab", arch, &mut rng)?,
            g_ba: Generator::new("g_ba", arch, &mut rng)?,
            d_a: Discriminator::new("d_a", arch, &mut rng)?,
            d_b: Discriminator::new("d_b", arch, &mut rng)?,
        };
        for net in m.modules_mut() {
            round_module(net);
        }
        Ok(m)
    }

    pub fn modules(&self) -> [&dyn Module; 4] {
        [&self.g_ab, &self.g_ba, &self.d_a, &self.d_b]
    }

    pub fn modules_mut(&mut self) -> [&mut dyn Module; 4] {
        [&mut self.g_ab, &mut self.g_ba, &mut self.d_a, &mut self.d_b]
    }

    /// One power iteration per discriminator pass (real and fake) of the
    /// coming phase.
    fn refresh_spectral(&mut self) {
        for _ in 0..D_PASSES_PER_PHASE {
            self.d_a.power_iterate();
            self.d_b.power_iterate();
        }
        round_module(&mut self.d_a);
        round_module(&mut self.d_b);
    }

    fn discriminator_ids(&self) -> Vec<ParamId> {
        let mut ids = self.d_a.param_ids();
        ids.extend(self.d_b.param_ids());
        ids
    }
}

/// Loss values of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Number of completed iterations including this one.
    pub iteration: u64,
    pub losses: LossBundle,
    /// Discriminator objective (negated adversarial value minus auxiliary term).
    pub loss_d: f64,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, l.l_str, l.l_idt, l.l_adv, l.l_cyc, l.l_aux, l.l_all
        )
    }
}

/// Discriminator objective for one domain: `-(adversarial value) - aux`.
fn discriminator_loss(tape: &mut Tape, d: &Discriminator, real: Var, fake: Var) -> Result<Var> {
    let r = d.forward(tape, real)?;
    let f = d.forward(tape, fake)?;
    let v = adversarial_value(tape, &[r.local_logits, r.global_logits], &[f.local_logits, f.global_logits])?;
    let aux = auxiliary_loss(tape, r.eta, f.eta)?;
    let s = tape.add(v, aux)?;
    tape.neg(s)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Leugan,
    opt_g: AdaBound,
    opt_d: AdaBound,
    iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Leugan::new(config.arch, config.seed)?;
        Ok(Trainer {
            opt_g: AdaBound::new(config.optim)?,
            opt_d: AdaBound::new(config.optim)?,
            model,
            config,
            iteration: 0,
        })
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let m = &self.model;
        let mut tensors = Vec::new();
        for net in m.modules() {
            push_module(&mut tensors, net);
        }
        let names = |a: &dyn Module, b: &dyn Module| {
            let mut v = Vec::new();
            a.visit(&mut |p| v.push(p.name().to_string()));
            b.visit(&mut |p| v.push(p.name().to_string()));
            v
        };
        let groups = [
            ("opt_g", names(&m.g_ab, &m.g_ba), &self.opt_g),
            ("opt_d", names(&m.d_a, &m.d_b), &self.opt_d),
        ];
        for (tag, names, opt) in groups {
            for (name, (mo, vo)) in names.iter().zip(opt.moments()) {
                tensors.push((format!("{tag}/{name}/m"), mo.clone()));
                tensors.push((format!("{tag}/{name}/v"), vo.clone()));
            }
        }
        Checkpoint {
            arch: m.arch,
            iteration: self.iteration,
            g_steps: self.opt_g.steps(),
            d_steps: self.opt_d.steps(),
            tensors,
        }
    }

    /// Rebuilds the full training state. The checkpoint architecture must
    /// match `config`.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.arch != config.arch {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for {:?}, config asks for {:?}",
                ckpt.arch, config.arch
            )));
        }
        let mut t = Trainer::new(config)?;
        let index = ckpt.index();
        for net in t.model.modules_mut() {
            load_module(net, &index)?;
        }
        let restore = |tag: &str, a: &dyn Module, b: &dyn Module, opt: &mut AdaBound, steps: u64| -> Result<()> {
            if steps == 0 {
                return Ok(());
            }
            let mut names = Vec::new();
            a.visit(&mut |p| names.push(p.name().to_string()));
            b.visit(&mut |p| names.push(p.name().to_string()));
            let moments = names
                .iter()
                .map(|n| {
                    let get = |k: &str| {
                        index
                            .get(format!("{tag}/{n}/{k}").as_str())
                            .map(|t| (*t).clone())
                            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {tag}/{n}/{k}")))
                    };
                    Ok((get("m")?, get("v")?))
                })
                .collect::<Result<Vec<_>>>()?;
            opt.restore(steps, moments);
            Ok(())
        };
        let m = &t.model;
        restore("opt_g", &m.g_ab, &m.g_ba, &mut t.opt_g, ckpt.g_steps)?;
        restore("opt_d", &m.d_a, &m.d_b, &mut t.opt_d, ckpt.d_steps)?;
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    /// One discriminator update followed by one generator update on the
    /// unpaired sample `(a, b)`.
    pub fn step(&mut self, a: &ImageBuffer, b: &ImageBuffer) -> Result<StepReport> {
        let (ta, tb) = (a.to_rgb().to_tensor(), b.to_rgb().to_tensor());
        let weights = self.config.weights;
        let m = &mut self.model;
        m.refresh_spectral();

        let mut gt = Tape::new();
        gt.freeze(m.discriminator_ids());
        let a = gt.constant(ta.clone())?;
        let b = gt.constant(tb.clone())?;
        let fake_b = m.g_ab.forward(&mut gt, a)?.image;
        let fake_a = m.g_ba.forward(&mut gt, b)?.image;
        let rec_a = m.g_ba.forward(&mut gt, fake_b)?.image;
        let rec_b = m.g_ab.forward(&mut gt, fake_a)?.image;
        let idt_b = m.g_ab.forward(&mut gt, b)?.image;
        let idt_a = m.g_ba.forward(&mut gt, a)?.image;

        let loss_d = {
            let mut dt = Tape::new();
            let (ra, rb) = (dt.constant(ta)?, dt.constant(tb)?);
            let fb = dt.constant(gt.value(fake_b).clone())?;
            let fa = dt.constant(gt.value(fake_a).clone())?;
            let lb = discriminator_loss(&mut dt, &m.d_b, rb, fb)?;
            let la = discriminator_loss(&mut dt, &m.d_a, ra, fa)?;
            let total = dt.add(la, lb)?;
            let value = dt.value(total).item();
            dt.backward(total)?;
            let mut pair = Pair(&mut m.d_a, &mut m.d_b);
            let grads = collect_grads(&dt, &pair);
            self.opt_d.step(&mut pair, &grads)?;
            round_module(&mut pair);
            self.opt_d.moments_mut().for_each(round_to_f32);
            value
        };
        m.refresh_spectral();

        let db_fake = m.d_b.forward(&mut gt, fake_b)?;
        let da_fake = m.d_a.forward(&mut gt, fake_a)?;
        let db_real = m.d_b.forward(&mut gt, b)?;
        let da_real = m.d_a.forward(&mut gt, a)?;

        let s_a = structural_loss(&mut gt, a, rec_a)?;
        let s_b = structural_loss(&mut gt, b, rec_b)?;
        let l_str = gt.add(s_a, s_b)?;
        let i_b = identity_loss(&mut gt, b, idt_b)?;
        let i_a = identity_loss(&mut gt, a, idt_a)?;
        let l_idt = gt.add(i_b, i_a)?;
        let adv_b = generator_adversarial(&mut gt, &[db_fake.local_logits, db_fake.global_logits])?;
        let adv_a = generator_adversarial(&mut gt, &[da_fake.local_logits, da_fake.global_logits])?;
        let l_adv = gt.add(adv_b, adv_a)?;
        let l_cyc = cycle_loss(&mut gt, &[(a, rec_a), (b, rec_b)])?;
        let aux_b = auxiliary_loss(&mut gt, db_real.eta, db_fake.eta)?;
        let aux_a = auxiliary_loss(&mut gt, da_real.eta, da_fake.eta)?;
        let l_aux = gt.add(aux_b, aux_a)?;

        let terms = [l_str, l_idt, l_adv, l_cyc, l_aux];
        let values: Vec<f64> = terms.iter().map(|&t| gt.value(t).item()).collect();
        let losses = total_loss(&values, &weights)?;
        let total = total_loss_var(&mut gt, &terms, &weights)?;
        gt.backward(total)?;
        let mut pair = Pair(&mut m.g_ab, &mut m.g_ba);
        let grads = collect_grads(&gt, &pair);
        self.opt_g.step(&mut pair, &grads)?;
        pair.0.clamp_rho();
        pair.1.clamp_rho();
        round_module(&mut pair);
        self.opt_g.moments_mut().for_each(round_to_f32);

        self.iteration += 1;
        Ok(StepReport {
            iteration: self.iteration,
            losses,
            loss_d,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub last: Option<StepReport>,
    pub checkpoint: PathBuf,
    pub iterations: u64,
}

/// Opens the CSV log for a run starting after `done` iterations, keeping the
/// header and the first `done` rows of an existing log.
fn open_log(path: &Path, done: u64) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if done > 0 {
        if let Ok(f) = File::open(path) {
            for line in BufReader::new(f).lines().skip(1).take(done as usize) {
                kept.push(line.map_err(|e| Error::io(path, e))?);
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Runs `trainer` to `config.iterations`, logging every step and writing
/// checkpoints on schedule and at the end.
pub fn run(trainer: &mut Trainer, dataset: UnpairedDataset) -> Result<TrainSummary> {
    let cfg = trainer.config.clone();
    let start = trainer.iteration();
    let mut log = open_log(&cfg.log, start)?;
    let prefetch = cfg.prefetch.then(|| Prefetcher::spawn(dataset.clone(), start, cfg.iterations));
    let mut last_good: Option<PathBuf> = cfg.resume.clone();
    let mut last = None;
    for it in start..cfg.iterations {
        let (a, b) = match &prefetch {
            Some(p) => {
                let (i, a, b) = p
                    .next_sample()
                    .ok_or_else(|| Error::Contract("sample worker stopped early".into()))??;
                debug_assert_eq!(i, it);
                (a, b)
            }
            None => dataset.sample(it)?,
        };
        let report = trainer.step(&a, &b).map_err(|e| {
            let _ = log.flush();
            let ckpt = last_good
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string());
            Error::Numeric(format!("training aborted at iteration {}: {e}; last good checkpoint: {ckpt}", it + 1))
        })?;
        writeln!(log, "{}", report.csv_row()).map_err(|e| Error::io(&cfg.log, e))?;
        if report.iteration % 100 == 0 || report.iteration == 1 {
            log::info!(
                "iter {} l_all {:.4} l_cyc {:.4} loss_d {:.4}",
                report.iteration,
                report.losses.l_all,
                report.losses.l_cyc,
                report.loss_d
            );
        }
        last = Some(report);
        if cfg.checkpoint_every > 0 && report.iteration % cfg.checkpoint_every == 0 && report.iteration < cfg.iterations {
            log.flush().map_err(|e| Error::io(&cfg.log, e))?;
            trainer.checkpoint().save(&cfg.checkpoint)?;
            last_good = Some(cfg.checkpoint.clone());
        }
    }
    log.flush().map_err(|e| Error::io(&cfg.log, e))?;
    trainer.checkpoint().save(&cfg.checkpoint)?;
    Ok(TrainSummary {
        last,
        checkpoint: cfg.checkpoint.clone(),
        iterations: trainer.iteration(),
    })
}

/// Loads both domains, optionally resumes, and trains.
pub fn train(config: &TrainConfig) -> Result<TrainSummary> {
    config.validate()?;
    let dataset = UnpairedDataset::load(
        &config.dir_a,
        &config.dir_b,
        Augmenter::with_size(config.arch.image_size),
        config.seed,
    )?;
    let mut trainer = match &config.resume {
        Some(p) => Trainer::from_checkpoint(config.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(config.clone())?,
    };
    run(&mut trainer, dataset)
}

/// Enhanced image plus the intermediate maps worth inspecting.
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub image: ImageBuffer,
    /// Min-max scaled pixel attention, resized to the input.
    pub attention: ImageBuffer,
    pub edges: ImageBuffer,
}

/// Inference wrapper around the low-to-normal generator.
#[derive(Clone, Debug)]
pub struct Enhancer {
    pub generator: Generator,
}

impl Enhancer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut generator = Generator::new("g_ab", ckpt.arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_module(&mut generator, &ckpt.index())?;
        Ok(Enhancer { generator })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Runs the generator at the nearest size the network accepts and
    /// resamples the results back to the input size.
    pub fn enhance(&self, img: &ImageBuffer) -> Result<Enhanced> {
        let factor = 1usize << self.generator.arch.n_down;
        let fit = |n: usize| (((n as f64 / factor as f64).round() as usize).max(2)) * factor;
        let (w, h) = (img.width(), img.height());
        let (fw, fh) = (fit(w), fit(h));
        let rgb = img.to_rgb();
        let input = if (fw, fh) == (w, h) { rgb } else { rgb.resize(fw, fh)? };
        let mut tape = Tape::new();
        let x = tape.constant(input.to_tensor())?;
        let out = self.generator.forward(&mut tape, x)?;
        let back = |t: &Tensor| -> Result<ImageBuffer> {
            let buf = ImageBuffer::from_tensor(t)?;
            if (buf.width(), buf.height()) == (w, h) { Ok(buf) } else { buf.resize(w, h) }
        };
        Ok(Enhanced {
            image: back(tape.value(out.image))?,
            attention: back(&normalize_for_display(tape.value(out.pixel_att)))?,
            edges: back(tape.value(out.edges))?,
        })
    }
}
