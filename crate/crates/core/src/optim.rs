//! Adam optimiser over a fixed list of tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[&Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update of every tensor in `params`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("Adam: parameter list changed between steps"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.numel() != p.numel() {
                return Err(Error::shape("Adam", format!("{:?} vs {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            **p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let mut opt = Adam::new(0.1, &[&x]);
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut [&mut x], &[g]).unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((x.data()[0] - 0.9).abs() < 1e-8);
        assert!((x.data()[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn minimises_quadratic() {
        let mut x = Tensor::new(vec![1], vec![5.0]).unwrap();
        let mut opt = Adam::new(0.1, &[&x]);
        for _ in 0..500 {
            let g = Tensor::new(vec![1], vec![2.0 * (x.data()[0] - 2.0)]).unwrap();
            opt.step(&mut [&mut x], &[g]).unwrap();
        }
        assert!((x.data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let orig = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let mut x = orig.clone();
        let mut opt = Adam::new(0.0, &[&x]);
        opt.step(&mut [&mut x], &[Tensor::full(&[3], 1.0)]).unwrap();
        assert_eq!(x, orig);
    }
}
