//! Acceptance checks, one printed PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`. Pass criterion
//! numbers as arguments (`-- 1 4 8`) to run a subset.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use leugan_core::attention::{residual_blend, AttentionBlock};
use leugan_core::autodiff::{grad_check, Tape, Var};
use leugan_core::edge::{edge_map, EdgeKernel};
use leugan_core::imaging::synthetic::{dead_leaves, smooth_gradient};
use leugan_core::imaging::{add_gaussian_noise, gaussian_blur, synth_darken, Augmenter, ImageBuffer, UnpairedDataset};
use leugan_core::losses::{
    adversarial_value, auxiliary_loss, cycle_loss, generator_adversarial, identity_loss, structural_loss,
    structural_similarity, total_loss, total_loss_var, LossWeights,
};
use leugan_core::metrics::{fit_pristine_model, niqe, pca_noise, vollath_f4, NiqeConfig, NIQE_PATCH};
use leugan_core::nn::{top_singular_value, ArchConfig, Conv2d, InstanceNorm, LayerInstanceNorm, Linear, Padding, SpectralNorm};
use leugan_core::optim::{AdaBound, AdaBoundConfig, BoundMode};
use leugan_core::param::{Module, Param, ParamId};
use leugan_core::train::{run, Checkpoint, Enhancer, Leugan, TrainConfig, Trainer};
use leugan_core::{Result, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scalar probe `sum(y * p)` with a fixed random `p`.
fn probe(t: &mut Tape, y: Var, p: &Tensor) -> Result<Var> {
    let p = t.constant(p.clone())?;
    let m = t.mul(y, p)?;
    t.sum(m)
}

fn probe_like(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

// ---------------------------------------------------------------- 1

type Objective<'a> = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>;

fn worst(checks: Vec<(&str, Tensor, Objective)>, log: &mut Vec<String>) -> Result<f64> {
    let mut max: f64 = 0.0;
    for (name, point, f) in checks {
        let err = grad_check(|t, x| f(t, x), &point, 1e-5)?;
        log.push(format!("{name}={err:.1e}"));
        max = max.max(err);
    }
    Ok(max)
}

/// Generator objective plus the discriminator value, through both
/// generators and both discriminators, as a function of the domain-A image.
fn composite(t: &mut Tape, m: &Leugan, a: Var, b_img: &Tensor) -> Result<Var> {
    let b = t.constant(b_img.clone())?;
    let fake_b = m.g_ab.forward(t, a)?.image;
    let fake_a = m.g_ba.forward(t, b)?.image;
    let rec_a = m.g_ba.forward(t, fake_b)?.image;
    let rec_b = m.g_ab.forward(t, fake_a)?.image;
    let idt_b = m.g_ab.forward(t, b)?.image;
    let idt_a = m.g_ba.forward(t, a)?.image;
    let db_fake = m.d_b.forward(t, fake_b)?;
    let da_fake = m.d_a.forward(t, fake_a)?;
    let db_real = m.d_b.forward(t, b)?;
    let da_real = m.d_a.forward(t, a)?;
    let s_a = structural_loss(t, a, rec_a)?;
    let s_b = structural_loss(t, b, rec_b)?;
    let l_str = t.add(s_a, s_b)?;
    let i_b = identity_loss(t, b, idt_b)?;
    let i_a = identity_loss(t, a, idt_a)?;
    let l_idt = t.add(i_a, i_b)?;
    let adv_b = generator_adversarial(t, &[db_fake.local_logits, db_fake.global_logits])?;
    let adv_a = generator_adversarial(t, &[da_fake.local_logits, da_fake.global_logits])?;
    let l_adv = t.add(adv_a, adv_b)?;
    let l_cyc = cycle_loss(t, &[(a, rec_a), (b, rec_b)])?;
    let aux_b = auxiliary_loss(t, db_real.eta, db_fake.eta)?;
    let aux_a = auxiliary_loss(t, da_real.eta, da_fake.eta)?;
    let l_aux = t.add(aux_a, aux_b)?;
    let g = total_loss_var(t, &[l_str, l_idt, l_adv, l_cyc, l_aux], &LossWeights::default())?;
    let value = adversarial_value(
        t,
        &[da_real.local_logits, da_real.global_logits],
        &[da_fake.local_logits, da_fake.global_logits],
    )?;
    t.add(g, value)
}

fn first_weight(m: &dyn Module) -> (ParamId, Tensor) {
    let mut found = None;
    m.visit(&mut |p| {
        if found.is_none() && p.name().ends_with(".weight") {
            found = Some((p.id(), p.value.clone()));
        }
    });
    found.expect("module has a conv weight")
}

fn criterion_1() -> Result<Outcome> {
    let mut r = rng(1);
    let mut log = Vec::new();

    let conv = Conv2d::new("c", 2, 3, 4, 2, Padding::Reflect(1), true, &mut r);
    let conv_s1 = Conv2d::new("c1", 2, 3, 3, 1, Padding::Zero(1), true, &mut r);
    let sn = Conv2d::new("s", 2, 3, 4, 2, Padding::Zero(1), true, &mut r).with_spectral_norm(&mut r);
    let lin = Linear::new("l", 6, 4, &mut r);
    let mut inorm = InstanceNorm::new("i", 2);
    inorm.gamma.value = Tensor::uniform(&[1, 2, 1, 1], 0.5, 1.5, &mut r);
    let mut lnorm = LayerInstanceNorm::new("n", 2);
    lnorm.rho.rho.value = Tensor::uniform(&[1, 2, 1, 1], 0.2, 0.8, &mut r);
    let img = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut r);
    let rows = Tensor::uniform(&[2, 6], -1.0, 1.0, &mut r);
    let (p3, p36, p4, p26) = (probe_like(&[1, 3, 3, 3], 2), probe_like(&[1, 3, 6, 6], 3), probe_like(&[2, 4], 4), probe_like(&[1, 2, 6, 6], 5));
    let w0 = sn.weight.value.clone();
    let rho0 = lnorm.rho.rho.value.clone();
    let layers: Vec<(&str, Tensor, Objective)> = vec![
        ("conv_reflect", img.clone(), Box::new(|t, x| { let y = conv.forward(t, x)?; probe(t, y, &p3) })),
        ("conv_zero", img.clone(), Box::new(|t, x| { let y = conv_s1.forward(t, x)?; probe(t, y, &p36) })),
        ("conv_spectral_input", img.clone(), Box::new(|t, x| { let y = sn.forward(t, x)?; probe(t, y, &p3) })),
        ("conv_spectral_weight", w0, Box::new(|t, w| {
            t.bind(&sn.weight, w);
            let x = t.constant(img.clone())?;
            let y = sn.forward(t, x)?;
            probe(t, y, &p3)
        })),
        ("linear", rows, Box::new(|t, x| { let y = lin.forward(t, x)?; probe(t, y, &p4) })),
        ("instance_norm", img.clone(), Box::new(|t, x| { let y = inorm.forward(t, x)?; probe(t, y, &p26) })),
        ("adalin_input", img.clone(), Box::new(|t, x| { let y = lnorm.forward(t, x)?; probe(t, y, &p26) })),
        ("adalin_rho", rho0, Box::new(|t, rv| {
            t.bind(&lnorm.rho.rho, rv);
            let x = t.constant(img.clone())?;
            let y = lnorm.forward(t, x)?;
            probe(t, y, &p26)
        })),
        ("activations", img.clone(), Box::new(|t, x| {
            let a = t.leaky_relu(x, 0.2)?;
            let b = t.relu(x)?;
            let c = t.tanh(x)?;
            let d = t.sigmoid(x)?;
            let s = t.add(a, b)?;
            let s = t.mul(s, c)?;
            let s = t.add(s, d)?;
            let u = t.upsample2x(s)?;
            let u = t.reflect_pad(u, 2)?;
            t.mean(u)
        })),
    ];
    let layer_err = worst(layers, &mut log)?;

    let mut block = AttentionBlock::new("a", 8, &mut r)?;
    block.lambda.value = Tensor::new(&[1], vec![0.7])?;
    block.cam_w.value = Tensor::randn(&[8], 0.1, &mut r);
    let e = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r);
    let pe = probe_like(&[1, 8, 4, 4], 6);
    let attention: Vec<(&str, Tensor, Objective)> = vec![("attention", e, Box::new(|t, x| {
        let maps = block.maps(t, x)?;
        let att = block.combined(t, maps)?;
        let lambda = t.param(&block.lambda)?;
        let out = residual_blend(t, x, att, lambda)?;
        let s = probe(t, out, &pe)?;
        let (eta, map) = block.cam(t, x)?;
        let eta = t.sum(eta)?;
        let map = t.mean(map)?;
        let s = t.add(s, eta)?;
        t.add(s, map)
    }))];
    let att_err = worst(attention, &mut log)?;

    let rgb = Tensor::uniform(&[1, 3, 6, 6], 0.0, 1.0, &mut r);
    let pedge = probe_like(&[1, 1, 6, 6], 7);
    let edges: Vec<(&str, Tensor, Objective)> = [EdgeKernel::Sobel, EdgeKernel::Scharr]
        .into_iter()
        .map(|k| {
            let pe = pedge.clone();
            let f: Objective = Box::new(move |t, x| { let y = edge_map(t, x, k)?; probe(t, y, &pe) });
            (if k == EdgeKernel::Sobel { "edge_sobel" } else { "edge_scharr" }, rgb.clone(), f)
        })
        .collect();
    let edge_err = worst(edges, &mut log)?;

    let other = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
    let point = Tensor::uniform(&[1, 3, 8, 8], 0.05, 0.95, &mut r);
    let logits = Tensor::randn(&[1, 1, 4, 4], 1.5, &mut r);
    let etas = Tensor::uniform(&[2, 1], 0.05, 0.95, &mut r);
    let losses: Vec<(&str, Tensor, Objective)> = vec![
        ("l_str", point.clone(), Box::new(|t, x| { let y = t.constant(other.clone())?; structural_loss(t, x, y) })),
        ("l_idt", point.clone(), Box::new(|t, x| { let y = t.constant(other.clone())?; identity_loss(t, x, y) })),
        ("l_cyc", point.clone(), Box::new(|t, x| {
            let y = t.constant(other.clone())?;
            let sq = t.square(x)?;
            cycle_loss(t, &[(x, y), (sq, y)])
        })),
        ("l_adv", logits, Box::new(|t, x| {
            let fake = t.mul_scalar(x, -0.5)?;
            let v = adversarial_value(t, &[x], &[fake])?;
            let g = generator_adversarial(t, &[fake])?;
            t.add(v, g)
        })),
        ("l_aux", etas, Box::new(|t, x| { let back = t.mul_scalar(x, 0.9)?; auxiliary_loss(t, x, back) })),
    ];
    let loss_err = worst(losses, &mut log)?;

    let arch = ArchConfig::tiny();
    let model = Leugan::new(arch, 3)?;
    let a = Tensor::uniform(&[1, 3, 8, 8], 0.05, 0.95, &mut r);
    let b = Tensor::uniform(&[1, 3, 8, 8], 0.05, 0.95, &mut r);
    let (g_id, g_w) = first_weight(&model.g_ab);
    let (d_id, d_w) = first_weight(&model.d_a);
    let full: Vec<(&str, Tensor, Objective)> = vec![
        ("composite_input", a.clone(), Box::new(|t, x| composite(t, &model, x, &b))),
        ("composite_g_weight", g_w, Box::new(|t, w| {
            t.bind_id(g_id, w);
            let x = t.constant(a.clone())?;
            composite(t, &model, x, &b)
        })),
        ("composite_d_weight", d_w, Box::new(|t, w| {
            t.bind_id(d_id, w);
            let x = t.constant(a.clone())?;
            composite(t, &model, x, &b)
        })),
    ];
    let full_err = worst(full, &mut log)?;

    let pass = layer_err < 1e-4 && att_err < 1e-4 && edge_err < 1e-4 && loss_err < 1e-4 && full_err < 1e-3;
    Ok(outcome(
        pass,
        format!(
            "max rel err: layers {layer_err:.1e}, attention {att_err:.1e}, edge {edge_err:.1e}, losses {loss_err:.1e} (<1e-4); composite {full_err:.1e} (<1e-3) [{}]",
            log.join(" ")
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Result<Outcome> {
    let mut r = rng(2);
    let mut worst_self: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;
    for _ in 0..10 {
        let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
        let y = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
        let mut t = Tape::new();
        let xv = t.constant(x.clone())?;
        let yv = t.constant(y)?;
        let s = structural_similarity(&mut t, xv, xv)?;
        worst_self = worst_self.max((t.value(s).item() - 1.0).abs());
        // Identity generators return their input unchanged.
        let (rec_a, rec_b) = (xv, yv);
        let cyc = cycle_loss(&mut t, &[(xv, rec_a), (yv, rec_b)])?;
        let idt_a = identity_loss(&mut t, xv, xv)?;
        let idt_b = identity_loss(&mut t, yv, yv)?;
        for v in [cyc, idt_a, idt_b] {
            worst_zero = worst_zero.max(t.value(v).item().abs());
        }
    }
    let weights = LossWeights::default();
    let w = weights.as_array();
    let mut worst_total: f64 = 0.0;
    for _ in 0..100 {
        let c: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
        let expect = c[0] + 10.0 * c[1] + 10.0 * c[2] + 10.0 * c[3] + 100.0 * c[4];
        worst_total = worst_total.max((total_loss(&c, &weights)?.l_all - expect).abs());
        let mut t = Tape::new();
        let vars = c.iter().map(|&v| t.constant(Tensor::scalar(v))).collect::<Result<Vec<_>>>()?;
        let tv = total_loss_var(&mut t, &vars, &weights)?;
        worst_total = worst_total.max((t.value(tv).item() - expect).abs());
    }
    let example = total_loss(&[0.1, 0.2, 0.3, 0.4, 0.05], &weights)?.l_all;
    worst_total = worst_total.max((example - 14.1).abs());
    let pass = w == [1.0, 10.0, 10.0, 10.0, 100.0] && worst_self <= 1e-10 && worst_zero <= 1e-10 && worst_total <= 1e-10;
    Ok(outcome(
        pass,
        format!(
            "|L_str(x,x)-1| {worst_self:.1e}, identity L_cyc/L_idt {worst_zero:.1e}, weighted total err {worst_total:.1e} with weights {w:?}"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Result<Outcome> {
    let mut r = rng(3);
    let block = AttentionBlock::new("a", 16, &mut r)?;
    let mut trials = 0;
    let mut exact = 0;
    for _ in 0..50 {
        let e = Tensor::randn(&[1, 16, 4, 4], 3.0, &mut r);
        let mut t = Tape::new();
        let ev = t.constant(e.clone())?;
        let maps = block.maps(&mut t, ev)?;
        let att = block.combined(&mut t, maps)?;
        let lambda = t.constant(Tensor::new(&[1], vec![0.0])?)?;
        let out = residual_blend(&mut t, ev, att, lambda)?;
        trials += 1;
        if t.value(out).data().iter().zip(e.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            exact += 1;
        }
    }
    Ok(outcome(exact == trials, format!("{exact}/{trials} blends with lambda=0 bit-identical to the input")))
}

// ---------------------------------------------------------------- 4

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * f * oh * ow);
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(ni, ci, iy as usize, ix as usize) * w.at4(fi, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn criterion_4() -> Result<Outcome> {
    let mut r = rng(4);
    let mut conv_err: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(1..=2);
        let c = r.random_range(1..=4);
        let f = r.random_range(1..=4);
        let k = r.random_range(1..=4);
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..k.min(3));
        let extent = |o: usize| (o - 1) * stride + k - 2 * pad;
        let h = extent(r.random_range(2..=6));
        let wd = extent(r.random_range(2..=6));
        let x = Tensor::uniform(&[n, c, h, wd], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[f, c, k, k], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[f], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone())?, t.constant(w.clone())?, t.constant(b.clone())?);
        let y = t.conv2d(xv, wv, Some(bv), stride, pad)?;
        let want = naive_conv(&x, &w, &b, stride, pad);
        let got = t.value(y).data();
        if got.len() != want.len() {
            return Ok(outcome(false, format!("conv2d output has {} values, loops give {}", got.len(), want.len())));
        }
        conv_err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(conv_err, f64::max);
    }

    let ramp = ImageBuffer::new(5, 1, 1, (0..5).map(|i| i as f64 / 255.0).collect())?;
    let vollath = vollath_f4(&ramp)?;

    let base = smooth_gradient(96, 96, 0.3, 0.7);
    let mut estimates = Vec::new();
    for (i, sigma) in [0.01, 0.05, 0.1].into_iter().enumerate() {
        let noisy = add_gaussian_noise(&base, sigma, &mut rng(40 + i as u64))?;
        estimates.push((sigma, pca_noise(&noisy)? / 255.0));
    }
    let within = estimates.iter().all(|&(s, e)| (e / s - 1.0).abs() <= 0.2);
    let monotone = estimates.windows(2).all(|p| p[1].1 > p[0].1);

    let pass = conv_err < 1e-12 && (vollath - 9.0).abs() < 1e-9 && within && monotone;
    let est: Vec<String> = estimates.iter().map(|(s, e)| format!("{s}->{e:.4}")).collect();
    Ok(outcome(
        pass,
        format!(
            "conv2d vs loops max err {conv_err:.1e} over 20 cases; Vollath ramp {vollath}; PCA noise {} (within 20%: {within}, monotone: {monotone})",
            est.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Result<Outcome> {
    let w = Tensor::new(&[2, 2, 1, 1], vec![3.0, 0.0, 0.0, 1.0])?;
    let sn = SpectralNorm::new("diag", &w, &mut rng(5));
    let mut t = Tape::new();
    let wv = t.constant(w.clone())?;
    let normalized = sn.apply(&mut t, wv)?;
    let top = top_singular_value(t.value(normalized));

    let dir = tempfile::tempdir().map_err(|e| leugan_core::Error::io("tempdir", e))?;
    let mut data = rng(50);
    let a = (0..8).map(|_| synth_darken(&dead_leaves(TOY_SIZE, TOY_SIZE, &mut data), 2.2, 0.02, &mut data)).collect::<Result<Vec<_>>>()?;
    let b = (0..8).map(|_| dead_leaves(TOY_SIZE, TOY_SIZE, &mut data)).collect();
    let ds = UnpairedDataset::from_images(a, b, Augmenter::with_size(TOY_SIZE), 5)?;
    let mut trainer = Trainer::new(TrainConfig { iterations: 200, ..toy_config(dir.path()) })?;
    let mut max_sigma: f64 = 0.0;
    for it in 0..200 {
        let (x, y) = ds.sample(it)?;
        trainer.step(&x, &y)?;
        for d in [&trainer.model.d_a, &trainer.model.d_b] {
            max_sigma = d.spectral_norms().into_iter().fold(max_sigma, f64::max);
        }
    }
    let pass = (top - 1.0).abs() <= 0.01 && max_sigma <= 1.05;
    Ok(outcome(
        pass,
        format!("diag(3,1) normalized top singular value {top:.6}; max over 200 training steps {max_sigma:.4} (<=1.05)"),
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Result<Outcome> {
    let size = 2 * NIQE_PATCH;
    let mut r = rng(6);
    let pristine: Vec<ImageBuffer> = (0..20).map(|_| dead_leaves(size, size, &mut r)).collect();
    let model = fit_pristine_model(&pristine, NiqeConfig::default())?;
    let corpus: Vec<ImageBuffer> = (0..10).map(|_| dead_leaves(size, size, &mut r)).collect();
    let (mut blur_worse, mut noise_worse) = (0, 0);
    let mut scores = Vec::new();
    for img in &corpus {
        let q = niqe(img, &model)?;
        let qb = niqe(&gaussian_blur(img, 3.0), &model)?;
        let qn = niqe(&add_gaussian_noise(img, 0.1, &mut r)?, &model)?;
        blur_worse += usize::from(qb > q);
        noise_worse += usize::from(qn > q);
        scores.push((q, qb, qn));
    }
    let n = corpus.len();
    let pass = blur_worse * 10 >= 9 * n && noise_worse * 10 >= 9 * n;
    let m = |f: fn(&(f64, f64, f64)) -> f64| mean(&scores.iter().map(f).collect::<Vec<_>>());
    Ok(outcome(
        pass,
        format!(
            "{size}x{size}, patch {NIQE_PATCH}: blurred worse {blur_worse}/{n}, noised worse {noise_worse}/{n}; mean NIQE original {:.2}, blurred {:.2}, noised {:.2}",
            m(|s| s.0),
            m(|s| s.1),
            m(|s| s.2)
        ),
    ))
}

// ---------------------------------------------------------------- 7

const TOY_SIZE: usize = 64;
const TOY_ITERATIONS: u64 = 5000;

fn toy_config(dir: &Path) -> TrainConfig {
    let arch = ArchConfig {
        image_size: TOY_SIZE,
        base_channels: 8,
        n_down: 1,
        n_res_blocks: 2,
        d_base_channels: 8,
        d_local_down: 3,
        d_global_down: 4,
        edge_kernel: EdgeKernel::Sobel,
    };
    let mut cfg = TrainConfig {
        arch,
        iterations: TOY_ITERATIONS,
        seed: 7,
        checkpoint_every: 0,
        checkpoint: dir.join("toy.ckpt"),
        log: dir.join("toy_log.csv"),
        ..TrainConfig::default()
    };
    cfg.optim.final_lr = 0.01;
    cfg
}

fn criterion_7() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| leugan_core::Error::io("tempdir", e))?;
    let mut r = rng(2024);
    let darken = |img: ImageBuffer, r: &mut ChaCha8Rng| synth_darken(&img, 2.2, 0.02, r);
    let normal: Vec<ImageBuffer> = (0..24).map(|_| dead_leaves(TOY_SIZE, TOY_SIZE, &mut r)).collect();
    let low = (0..24).map(|_| { let i = dead_leaves(TOY_SIZE, TOY_SIZE, &mut r); darken(i, &mut r) }).collect::<Result<Vec<_>>>()?;
    let test = (0..10).map(|_| { let i = dead_leaves(TOY_SIZE, TOY_SIZE, &mut r); darken(i, &mut r) }).collect::<Result<Vec<_>>>()?;
    let model = fit_pristine_model(&normal, NiqeConfig::with_patch(16))?;

    let cfg = toy_config(dir.path());
    let ds = UnpairedDataset::from_images(low, normal.clone(), Augmenter::with_size(TOY_SIZE), cfg.seed)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    let summary = run(&mut trainer, ds)?;
    let elapsed = start.elapsed();

    let enhancer = Enhancer::load(&summary.checkpoint)?;
    let outputs = test.iter().map(|i| enhancer.enhance(i).map(|e| e.image)).collect::<Result<Vec<_>>>()?;
    let avg = |imgs: &[ImageBuffer], f: &dyn Fn(&ImageBuffer) -> Result<f64>| -> Result<f64> {
        Ok(mean(&imgs.iter().map(f).collect::<Result<Vec<_>>>()?))
    };
    let target = avg(&normal, &|i| Ok(i.mean()))?;
    let before = avg(&test, &|i| Ok(i.mean()))?;
    let after = avg(&outputs, &|i| Ok(i.mean()))?;
    let closed = (after - before) / (target - before);
    let niqe_in = avg(&test, &|i| niqe(i, &model))?;
    let niqe_out = avg(&outputs, &|i| niqe(i, &model))?;
    let pca_in = avg(&test, &pca_noise)?;
    let pca_out = avg(&outputs, &pca_noise)?;

    let pass = closed >= 0.5 && niqe_out < niqe_in && pca_out <= 1.2 * pca_in && elapsed < Duration::from_secs(3600);
    Ok(outcome(
        pass,
        format!(
            "{TOY_ITERATIONS} iterations in {:.0}s; brightness {before:.3} -> {after:.3} (target {target:.3}, gap closed {:.0}%); NIQE {niqe_in:.2} -> {niqe_out:.2}; PCA noise {pca_in:.3} -> {pca_out:.3} (ratio {:.2})",
            elapsed.as_secs_f64(),
            100.0 * closed,
            pca_out / pca_in
        ),
    ))
}

// ---------------------------------------------------------------- 8

struct Scalar(Param);

impl Module for Scalar {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.0);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.0);
    }
}

fn criterion_8() -> Result<Outcome> {
    let config = AdaBoundConfig::default();
    let mut w = Scalar(Param::new("w", Tensor::scalar(0.0)));
    let mut opt = AdaBound::new(config)?;
    let (b1, b2) = config.betas;
    let (mut m, mut v) = (0.0, 0.0);
    let mut reached = None;
    let mut bound_violations = 0;
    for step in 1..=5000u64 {
        let before = w.0.value.item();
        let g = 2.0 * (before - 3.0);
        opt.step(&mut w, &[Some(Tensor::scalar(g))])?;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(step as i32));
        let moved = before - w.0.value.item() - config.lr * config.weight_decay * before;
        if m_hat != 0.0 {
            // Recovering eta from the parameter change loses a few ulps of w.
            let slack = 4.0 * f64::EPSILON * before.abs().max(3.0) / m_hat.abs();
            let eta = moved / m_hat;
            let (lb, ub) = (config.lower_bound(step), config.upper_bound(step));
            if eta < lb - slack || eta > ub + slack {
                bound_violations += 1;
            }
        }
        if reached.is_none() && (w.0.value.item() - 3.0).abs() < 1e-3 {
            reached = Some(step);
        }
    }

    let adam = AdaBoundConfig { lr: 1e-2, weight_decay: 0.0, bounds: BoundMode::Unbounded, ..AdaBoundConfig::default() };
    let start = [0.5, -1.5, 2.0, 0.1];
    let grad = |p: &[f64]| -> Vec<f64> {
        vec![
            2.0 * (p[0] - 1.0) + p[1] * p[2],
            4.0 * p[1].powi(3) + p[0] * p[2],
            p[2].sin() + p[0] * p[1],
            (p[3] - 0.3).exp() - 1.0,
        ]
    };
    let mut net = Scalar(Param::new("p", Tensor::new(&[4], start.to_vec())?));
    let mut opt = AdaBound::new(adam)?;
    let mut p = start.to_vec();
    let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
    let mut adam_err: f64 = 0.0;
    for step in 1..=50 {
        let g = grad(net.0.value.data());
        opt.step(&mut net, &[Some(Tensor::new(&[4], g)?)])?;
        let g = grad(&p);
        for i in 0..4 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - b1.powi(step));
            let v_hat = v[i] / (1.0 - b2.powi(step));
            p[i] -= adam.lr * m_hat / (v_hat.sqrt() + adam.eps);
        }
        adam_err = net.0.value.data().iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(adam_err, f64::max);
    }

    let pass = reached.is_some() && bound_violations == 0 && adam_err <= 1e-10;
    Ok(outcome(
        pass,
        format!(
            "(w-3)^2 from 0: |w-3|<1e-3 at step {}; bound violations {bound_violations}/5000; Adam max diff over 50 steps {adam_err:.1e}",
            reached.map_or("never".to_string(), |s| s.to_string())
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Result<Outcome> {
    let root = tempfile::tempdir().map_err(|e| leugan_core::Error::io("tempdir", e))?;
    let arch = ArchConfig { image_size: 16, d_local_down: 2, d_global_down: 2, ..ArchConfig::tiny() };
    let dataset = || -> Result<UnpairedDataset> {
        let mut r = rng(90);
        let a = (0..3).map(|_| synth_darken(&dead_leaves(24, 24, &mut r), 2.2, 0.02, &mut r)).collect::<Result<Vec<_>>>()?;
        let b = (0..3).map(|_| dead_leaves(24, 24, &mut r)).collect();
        UnpairedDataset::from_images(a, b, Augmenter::with_size(16), 9)
    };
    let mut logs = Vec::new();
    let mut ckpts = Vec::new();
    for run_id in 0..2 {
        let dir = root.path().join(format!("run{run_id}"));
        let cfg = TrainConfig {
            arch,
            iterations: 30,
            seed: 9,
            checkpoint_every: 10,
            checkpoint: dir.join("model.ckpt"),
            log: dir.join("log.csv"),
            ..TrainConfig::default()
        };
        std::fs::create_dir_all(&dir).map_err(|e| leugan_core::Error::io(&dir, e))?;
        let mut trainer = Trainer::new(cfg.clone())?;
        run(&mut trainer, dataset()?)?;
        logs.push(std::fs::read(&cfg.log).map_err(|e| leugan_core::Error::io(&cfg.log, e))?);
        ckpts.push(std::fs::read(&cfg.checkpoint).map_err(|e| leugan_core::Error::io(&cfg.checkpoint, e))?);
    }
    let same_log = logs[0] == logs[1] && !logs[0].is_empty();
    let rows = String::from_utf8_lossy(&logs[0]).lines().count().saturating_sub(1);

    let loaded = Checkpoint::from_bytes(&ckpts[0])?;
    let resaved = loaded.to_bytes();
    let path = root.path().join("again.ckpt");
    loaded.save(&path)?;
    let reloaded = Checkpoint::load(&path)?;
    let cfg = TrainConfig { arch, ..TrainConfig::default() };
    let restored = Trainer::from_checkpoint(cfg, &reloaded)?;
    let round_trip = resaved == ckpts[0] && restored.checkpoint().to_bytes() == ckpts[0];
    let pass = same_log && ckpts[0] == ckpts[1] && round_trip;
    Ok(outcome(
        pass,
        format!(
            "two seed-9 runs: loss CSVs identical {same_log} ({rows} rows), checkpoints identical {}; save/load/save bit-exact {round_trip}",
            ckpts[0] == ckpts[1]
        ),
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Result<Outcome>); 9] = [
        (1, "gradient checks", criterion_1),
        (2, "loss identities", criterion_2),
        (3, "zero-lambda blend", criterion_3),
        (4, "conv, Vollath and noise oracles", criterion_4),
        (5, "spectral normalization", criterion_5),
        (6, "NIQE degradation ranking", criterion_6),
        (7, "toy enhancement run", criterion_7),
        (8, "AdaBound", criterion_8),
        (9, "reproducibility and checkpoints", criterion_9),
    ];
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} [{verdict}] {name}: {} ({:.1}s)",
            result.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
