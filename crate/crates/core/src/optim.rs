//! AdamW with bias correction and decoupled weight decay.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Matrix,
    pub second: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    /// Indexed by [`ParamId`]; `None` until the parameter first receives a gradient.
    pub moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self { learning_rate, weight_decay, step: 0, moments: Vec::new() }
    }

    /// Applies one update to every parameter in `grads`. Parameters without
    /// a gradient are left untouched, including their weight decay.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                bail!(Divergence, "non-finite gradient for parameter {}", store.name(*id));
            }
            if g.shape() != store.get(*id).shape() {
                bail!(Shape, "gradient for {} has shape {:?}, expected {:?}", store.name(*id), g.shape(), store.get(*id).shape());
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(BETA1, t);
        let c2 = 1.0 - libm::pow(BETA2, t);
        let (lr, wd) = (self.learning_rate, self.weight_decay);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let mom = self.moments[id.0].get_or_insert_with(|| Moments {
                first: Matrix::zeros(g.rows(), g.cols()),
                second: Matrix::zeros(g.rows(), g.cols()),
            });
            let it = p.data_mut().iter_mut().zip(g.data()).zip(mom.first.data_mut().iter_mut().zip(mom.second.data_mut()));
            for ((p, &g), (m, v)) in it {
                *p -= lr * wd * *p;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (libm::sqrt(v_hat) + EPS);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flat_map(|(_, g)| g.data()).map(|v| v * v).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Matrix::scalar(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(1.7);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.update(&mut s, &[(id, Matrix::scalar(0.0))]).unwrap();
        assert_eq!(s.get(id).data(), &[1.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.update(&mut s, &[(id, Matrix::scalar(1.0))]).unwrap();
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((s.get(id).data()[0] - expect).abs() < 1e-15);
        assert!((s.get(id).data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_with_zero_gradient_is_exact() {
        let (mut s, id) = scalar_store(2.0);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.update(&mut s, &[(id, Matrix::scalar(0.0))]).unwrap();
        assert_eq!(s.get(id).data()[0], 2.0 - 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let err = AdamW::new(0.1, 0.0).update(&mut s, &[(id, Matrix::scalar(f64::NAN))]).unwrap_err();
        assert!(alloc::format!("{err}").contains('p'));
        assert_eq!(s.get(id).data(), &[1.0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = alloc::vec![(ParamId(0), Matrix::row_vector(&[3.0, 4.0]))];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15);
    }
}
