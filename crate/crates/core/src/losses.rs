//! Training objectives: structural similarity, identity, adversarial, cycle
//! and class-activation terms plus their weighted total.

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::Tensor;

/// Stabilizer of the structural ratio.
pub const THETA: f64 = 1.0;

/// Probability clamp keeping every logarithm finite.
pub const PROB_EPS: f64 = 1e-7;

/// Sample statistics behind the structural term (unbiased, `n - 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructuralStats {
    pub mu_x: f64,
    pub mu_y: f64,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub lambda_xy: f64,
    pub theta: f64,
    pub n: usize,
}

impl StructuralStats {
    pub fn compute(x: &Tensor, y: &Tensor) -> Result<Self> {
        check_pair(x.shape(), y.shape())?;
        let n = x.numel();
        let (mu_x, mu_y) = (x.mean(), y.mean());
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for (&a, &b) in x.data().iter().zip(y.data()) {
            let (da, db) = (a - mu_x, b - mu_y);
            sxx += da * da;
            syy += db * db;
            sxy += da * db;
        }
        let d = (n - 1) as f64;
        Ok(StructuralStats {
            mu_x,
            mu_y,
            lambda_x: (sxx / d).sqrt(),
            lambda_y: (syy / d).sqrt(),
            lambda_xy: sxy / d,
            theta: THETA,
            n,
        })
    }

    /// `(lambda_xy + theta) / (lambda_x * lambda_y + theta)`.
    pub fn similarity(&self) -> f64 {
        (self.lambda_xy + self.theta) / (self.lambda_x * self.lambda_y + self.theta)
    }
}

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err!("loss operands differ in shape: {a:?} vs {b:?}"));
    }
    if a.iter().product::<usize>() < 2 {
        return Err(contract_err!("structural statistics need at least two values"));
    }
    Ok(())
}

/// Taped structural similarity of `x` and `y` over all their elements.
pub fn structural_similarity(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    check_pair(tape.shape(x), tape.shape(y))?;
    let n = tape.value(x).numel() as f64;
    let scale = n / (n - 1.0);
    let centred = |tape: &mut Tape, v: Var| -> Result<Var> {
        let m = tape.mean(v)?;
        tape.sub(v, m)
    };
    let dx = centred(tape, x)?;
    let dy = centred(tape, y)?;
    let unbiased_mean = |tape: &mut Tape, v: Var| -> Result<Var> {
        let m = tape.mean(v)?;
        tape.mul_scalar(m, scale)
    };
    let dxx = tape.square(dx)?;
    let var_x = unbiased_mean(tape, dxx)?;
    let dyy = tape.square(dy)?;
    let var_y = unbiased_mean(tape, dyy)?;
    let dxy = tape.mul(dx, dy)?;
    let cov = unbiased_mean(tape, dxy)?;
    let sx = tape.sqrt(var_x)?;
    let sy = tape.sqrt(var_y)?;
    let num = tape.add_scalar(cov, THETA)?;
    let sxy = tape.mul(sx, sy)?;
    let den = tape.add_scalar(sxy, THETA)?;
    tape.div(num, den)
}

/// `1 - similarity`, the minimized form.
pub fn structural_loss(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let s = structural_similarity(tape, x, y)?;
    tape.rsub_scalar(1.0, s)
}

/// Mean absolute difference.
pub fn l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err!(
            "loss operands differ in shape: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `mean |x - G(x)|` for a target-domain sample passed through the generator
/// that maps into that domain.
pub fn identity_loss(tape: &mut Tape, x: Var, g_of_x: Var) -> Result<Var> {
    l1(tape, x, g_of_x)
}

/// Sum over both domains of `mean |x - G'(G(x))|`.
pub fn cycle_loss(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(x, rec) in pairs {
        let term = l1(tape, x, rec)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| contract_err!("cycle loss needs at least one pair"))
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

fn clamped_prob(tape: &mut Tape, logits: Var) -> Result<Var> {
    let p = tape.sigmoid(logits)?;
    tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
}

fn mean_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let l = tape.log(p)?;
    tape.mean(l)
}

fn average(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.mul_scalar(acc, 1.0 / terms.len() as f64)
}

/// Minimax value `E[log D(x)] + E[log(1 - D(G(x)))]`, averaged over the
/// discriminator scales. `real` and `fake` hold one logit grid per scale.
pub fn adversarial_value(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(contract_err!(
            "need matching logit scales, got {} real and {} fake",
            real.len(),
            fake.len()
        ));
    }
    let mut per_scale = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        check_finite(tape, r, "real logits")?;
        check_finite(tape, f, "fake logits")?;
        let pr = clamped_prob(tape, r)?;
        let lr = mean_log(tape, pr)?;
        let pf = clamped_prob(tape, f)?;
        let qf = tape.rsub_scalar(1.0, pf)?;
        let lf = mean_log(tape, qf)?;
        per_scale.push(tape.add(lr, lf)?);
    }
    average(tape, &per_scale)
}

/// Non-saturating generator objective `-E[log D(G(x))]`, averaged over
/// scales.
pub fn generator_adversarial(tape: &mut Tape, fake: &[Var]) -> Result<Var> {
    if fake.is_empty() {
        return Err(contract_err!("need at least one logit scale"));
    }
    let mut per_scale = Vec::with_capacity(fake.len());
    for &f in fake {
        check_finite(tape, f, "fake logits")?;
        let pf = clamped_prob(tape, f)?;
        let l = mean_log(tape, pf)?;
        per_scale.push(tape.neg(l)?);
    }
    average(tape, &per_scale)
}

/// `(loss_d, loss_g)`: the negated minimax value and the non-saturating
/// generator term.
pub fn adversarial_loss(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<(Var, Var)> {
    let value = adversarial_value(tape, real, fake)?;
    let loss_d = tape.neg(value)?;
    let loss_g = generator_adversarial(tape, fake)?;
    Ok((loss_d, loss_g))
}

/// `E[eta(x)^2] + E[2 log(1 - eta(G(x)))]` over real and translated samples.
pub fn auxiliary_loss(tape: &mut Tape, eta_real: Var, eta_fake: Var) -> Result<Var> {
    for (v, what) in [(eta_real, "real"), (eta_fake, "fake")] {
        let t = tape.value(v);
        if !t.data().iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(contract_err!("{what} class probabilities must lie in [0,1]"));
        }
    }
    let sq = tape.square(eta_real)?;
    let real_term = tape.mean(sq)?;
    let fake = tape.clamp(eta_fake, 0.0, 1.0 - PROB_EPS)?;
    let q = tape.rsub_scalar(1.0, fake)?;
    let l = tape.log(q)?;
    let l = tape.mean(l)?;
    let fake_term = tape.mul_scalar(l, 2.0)?;
    tape.add(real_term, fake_term)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub structural: f64,
    pub identity: f64,
    pub adversarial: f64,
    pub cycle: f64,
    pub auxiliary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            structural: 1.0,
            identity: 10.0,
            adversarial: 10.0,
            cycle: 10.0,
            auxiliary: 100.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.structural, self.identity, self.adversarial, self.cycle, self.auxiliary]
    }

    pub fn scaled(&self, c: f64) -> Self {
        let [s, i, a, cy, au] = self.as_array().map(|w| w * c);
        LossWeights {
            structural: s,
            identity: i,
            adversarial: a,
            cycle: cy,
            auxiliary: au,
        }
    }
}

/// The five generator-side components and their weighted total. `l_str`
/// holds the minimized form `1 - similarity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_str: f64,
    pub l_idt: f64,
    pub l_adv: f64,
    pub l_cyc: f64,
    pub l_aux: f64,
    pub l_all: f64,
}

impl LossBundle {
    pub fn components(&self) -> [f64; 5] {
        [self.l_str, self.l_idt, self.l_adv, self.l_cyc, self.l_aux]
    }
}

/// Weighted sum of exactly five components in the order
/// structural, identity, adversarial, cycle, auxiliary.
pub fn total_loss(components: &[f64], weights: &LossWeights) -> Result<LossBundle> {
    let c: [f64; 5] = components
        .try_into()
        .map_err(|_| contract_err!("expected 5 loss components, got {}", components.len()))?;
    if !c.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss component in {c:?}")));
    }
    let l_all = c.iter().zip(weights.as_array()).map(|(v, w)| v * w).sum();
    Ok(LossBundle {
        l_str: c[0],
        l_idt: c[1],
        l_adv: c[2],
        l_cyc: c[3],
        l_aux: c[4],
        l_all,
    })
}

/// Taped counterpart of [`total_loss`].
pub fn total_loss_var(tape: &mut Tape, terms: &[Var], weights: &LossWeights) -> Result<Var> {
    if terms.len() != 5 {
        return Err(contract_err!("expected 5 loss components, got {}", terms.len()));
    }
    let mut acc: Option<Var> = None;
    for (&t, w) in terms.iter().zip(weights.as_array()) {
        let s = tape.mul_scalar(t, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("five terms"))
}
