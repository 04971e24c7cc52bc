use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::Param;
use crate::Tensor;

/// Lower bound on the singular-value estimate used as a divisor.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Power-iteration steps run when the state is created.
pub const WARM_START_ITERS: usize = 30;

/// Left singular-vector estimate for a weight viewed as `[out, rest]`.
#[derive(Clone, Debug)]
pub struct SpectralNorm {
    pub u: Param,
}

fn rows_cols(w: &Tensor) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.numel() / rows.max(1))
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > SIGMA_FLOOR {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    v
}

fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &x) in out.iter_mut().zip(row) {
            *o += u[r] * x;
        }
    }
    out
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

impl SpectralNorm {
    pub fn new<R: Rng + ?Sized>(name: &str, weight: &Tensor, rng: &mut R) -> Self {
        let (rows, _) = rows_cols(weight);
        let u = normalized(Tensor::randn(&[rows], 1.0, rng).into_data());
        let mut sn = SpectralNorm {
            u: Param::new(format!("{name}.sn_u"), Tensor::new(&[rows], u).expect("u shape")),
        };
        sn.power_iterate(weight, WARM_START_ITERS);
        sn
    }

    fn right_vector(&self, w: &Tensor) -> Vec<f64> {
        let (rows, cols) = rows_cols(w);
        normalized(mat_t_vec(w.data(), rows, cols, self.u.value.data()))
    }

    /// `u^T W v` with `v = W^T u / |W^T u|`.
    pub fn sigma(&self, w: &Tensor) -> f64 {
        let (rows, cols) = rows_cols(w);
        let v = self.right_vector(w);
        let wv = mat_vec(w.data(), rows, cols, &v);
        wv.iter().zip(self.u.value.data()).map(|(a, b)| a * b).sum()
    }

    /// `u <- W v / |W v|` after `v <- W^T u / |W^T u|`, repeated `iters` times.
    pub fn power_iterate(&mut self, w: &Tensor, iters: usize) {
        let (rows, cols) = rows_cols(w);
        for _ in 0..iters {
            let v = self.right_vector(w);
            let u = normalized(mat_vec(w.data(), rows, cols, &v));
            if u.iter().all(|&x| x == 0.0) {
                break;
            }
            self.u.value.data_mut().copy_from_slice(&u);
        }
    }

    /// `W / max(sigma, floor)` on the tape, treating `u` and `v` as constants.
    pub fn apply(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        let wt = tape.value(w).clone();
        let v = self.right_vector(&wt);
        let u = self.u.value.data();
        let outer = Tensor::from_fn(wt.shape(), |i| u[i / v.len()] * v[i % v.len()]);
        let outer = tape.constant(outer)?;
        let prod = tape.mul(w, outer)?;
        let sigma = tape.sum(prod)?;
        let sigma = tape.clamp(sigma, SIGMA_FLOOR, f64::INFINITY)?;
        tape.div(w, sigma)
    }
}

/// Largest singular value via a symmetric eigendecomposition of `W W^T`.
pub fn top_singular_value(w: &Tensor) -> f64 {
    let (rows, cols) = rows_cols(w);
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, w.data());
    let gram = if rows <= cols { &m * m.transpose() } else { m.transpose() * &m };
    let eig = nalgebra::SymmetricEigen::new(gram);
    eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(0.0).sqrt()
}
