//! AdaBound and plain SGD.

use crate::autodiff::Tape;
use crate::error::{config_err, contract_err, Error, Result};
use crate::param::{Module, Param};
use crate::Tensor;

/// Gradient of every parameter of `module`, in visit order.
pub fn collect_grads(tape: &Tape, module: &dyn Module) -> Vec<Option<Tensor>> {
    let mut grads = Vec::new();
    module.visit(&mut |p| grads.push(tape.param_grad(p)));
    grads
}

fn check_grads(module: &dyn Module, grads: &[Option<Tensor>]) -> Result<()> {
    let mut count = 0;
    let mut problem: Option<Error> = None;
    module.visit(&mut |p| {
        if problem.is_none() {
            if let Some(Some(g)) = grads.get(count) {
                if g.shape() != p.value.shape() {
                    problem = Some(contract_err!(
                        "gradient for {} has shape {:?}, parameter is {:?}",
                        p.name(),
                        g.shape(),
                        p.value.shape()
                    ));
                } else if !g.all_finite() {
                    problem = Some(Error::Numeric(format!("non-finite gradient for {}", p.name())));
                }
            }
        }
        count += 1;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if count != grads.len() {
        return Err(contract_err!("{} gradients for {count} parameters", grads.len()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundMode {
    /// Step sizes clipped into the dynamic `[lb(t), ub(t)]` band.
    Clipped,
    /// No clipping: the update reduces to Adam.
    Unbounded,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaBoundConfig {
    pub lr: f64,
    pub final_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub bounds: BoundMode,
}

impl Default for AdaBoundConfig {
    fn default() -> Self {
        AdaBoundConfig {
            lr: 1e-4,
            final_lr: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            gamma: 1e-3,
            weight_decay: 1e-4,
            bounds: BoundMode::Clipped,
        }
    }
}

impl AdaBoundConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr >= 0.0 && self.final_lr > 0.0 && self.eps > 0.0 && self.gamma > 0.0) {
            return Err(config_err!("learning rates, eps and gamma must be positive: {self:?}"));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(config_err!("betas must lie in [0,1): {:?}", self.betas));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight decay must be non-negative"));
        }
        Ok(())
    }

    /// `final_lr * (1 - 1/(gamma t + 1))`.
    pub fn lower_bound(&self, t: u64) -> f64 {
        match self.bounds {
            BoundMode::Clipped => self.final_lr * (1.0 - 1.0 / (self.gamma * t as f64 + 1.0)),
            BoundMode::Unbounded => 0.0,
        }
    }

    /// `final_lr * (1 + 1/(gamma t))`.
    pub fn upper_bound(&self, t: u64) -> f64 {
        match self.bounds {
            BoundMode::Clipped => self.final_lr * (1.0 + 1.0 / (self.gamma * t as f64)),
            BoundMode::Unbounded => f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaBound {
    pub config: AdaBoundConfig,
    t: u64,
    /// First and second moments in module visit order.
    moments: Vec<(Tensor, Tensor)>,
}

impl AdaBound {
    pub fn new(config: AdaBoundConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdaBound {
            config,
            t: 0,
            moments: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &[(Tensor, Tensor)] {
        &self.moments
    }

    /// Restores a saved step counter and moments.
    pub fn restore(&mut self, t: u64, moments: Vec<(Tensor, Tensor)>) {
        self.t = t;
        self.moments = moments;
    }

    pub fn moments_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.moments.iter_mut().flat_map(|(m, v)| [m, v])
    }

    /// One update of every parameter in `module`; parameters whose gradient
    /// is `None` are left untouched.
    pub fn step(&mut self, module: &mut dyn Module, grads: &[Option<Tensor>]) -> Result<()> {
        check_grads(module, grads)?;
        if self.moments.is_empty() {
            module.visit(&mut |p| {
                self.moments
                    .push((Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            });
        } else if self.moments.len() != grads.len() {
            return Err(contract_err!(
                "optimizer holds state for {} parameters, got {}",
                self.moments.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let t = self.t;
        let cfg = self.config;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - b2.powi(t.min(i32::MAX as u64) as i32);
        let (lb, ub) = (cfg.lower_bound(t), cfg.upper_bound(t));
        debug_assert!(lb <= ub);
        let mut idx = 0;
        let moments = &mut self.moments;
        module.visit_mut(&mut |p: &mut Param| {
            let i = idx;
            idx += 1;
            let Some(g) = &grads[i] else { return };
            let (m, v) = &mut moments[i];
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(md).zip(vd) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let eta = (cfg.lr / (v_hat.sqrt() + cfg.eps)).clamp(lb, ub);
                debug_assert!(eta >= lb && eta <= ub);
                *w -= eta * m_hat + cfg.lr * cfg.weight_decay * *w;
            }
        });
        Ok(())
    }
}

/// `p <- p - lr * g`.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, module: &mut dyn Module, grads: &[Option<Tensor>]) -> Result<()> {
        check_grads(module, grads)?;
        let mut idx = 0;
        module.visit_mut(&mut |p| {
            if let Some(g) = &grads[idx] {
                for (w, gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w -= self.lr * gi;
                }
            }
            idx += 1;
        });
        Ok(())
    }
}
