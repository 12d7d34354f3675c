use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::nets::ParamSet;

/// `lr0 · ½ · (1 + cos(π · step / phase_len))`; `lr0` for an empty phase.
pub fn cosine_lr(step: u64, phase_len: u64, lr0: f64) -> f64 {
    if phase_len == 0 {
        return lr0;
    }
    let t = step.min(phase_len) as f64 / phase_len as f64;
    if t == 0.5 {
        // cos(π/2) is not exactly zero in floating point.
        return lr0 / 2.0;
    }
    if t == 1.0 {
        return 0.0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *pj -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_points() {
        let lr0 = 1e-4;
        assert_eq!(cosine_lr(0, 200, lr0), lr0);
        assert_eq!(cosine_lr(100, 200, lr0), lr0 / 2.0);
        assert_eq!(cosine_lr(200, 200, lr0), 0.0);
        assert_eq!(cosine_lr(5, 11, lr0), cosine_lr(5, 11, lr0));
        let mut last = f64::INFINITY;
        for s in 0..=50 {
            let v = cosine_lr(s, 50, lr0);
            assert!(v <= last && v >= 0.0);
            last = v;
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut opt = Adam::new(&p, 0.5, 0.9);
        let g = Tensor::new(vec![3], vec![0.5, -2.0, 0.0]).unwrap();
        opt.step(&mut p, &[g], 0.1).unwrap();
        let d = p.tensors()[0].data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] - 2.1).abs() < 1e-7);
        assert_eq!(d[2], 3.0);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![2], vec![3.0, -4.0]).unwrap());
        let mut opt = Adam::new(&p, 0.5, 0.9);
        for _ in 0..2000 {
            let g = p.tensors()[0].map(|v| 2.0 * v);
            opt.step(&mut p, &[g], 0.01).unwrap();
        }
        assert!(p.tensors()[0].data().iter().all(|v| v.abs() < 1e-2));
    }
}
