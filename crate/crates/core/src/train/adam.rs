//! Adam with bias-corrected moments.

use crate::nets::ParamSet;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update. `grads[i]` pairs with the i-th tensor of `params`; `None`
    /// counts as a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match parameters");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let Some(g) = g else {
                // zero gradient: moments decay, step follows the decayed moments
                for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi *= self.beta1;
                    *vi *= self.beta2;
                    *pi -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                }
                continue;
            };
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(v: f64) -> ParamSet {
        ParamSet::new("s", vec![("x".into(), Tensor::row(&[v]))]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = ParamSet::new("s", vec![("x".into(), Tensor::row(&[0.3, -1.0, 0.0]))]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(1e-3, &p);
        for _ in 0..3 {
            adam.step(&mut p, &[Some(vec![0.0; 3])]);
        }
        assert!(p.bits_eq(&before));
        assert!(adam.first_moments()[0].iter().all(|&m| m == 0.0));
        assert!(adam.second_moments()[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_hand_arithmetic() {
        // m = 0.1·g, v = 0.001·g², m̂ = g, v̂ = g², step = lr·g/(|g| + eps)
        let mut p = scalar(1.0);
        let mut adam = Adam::new(0.01, &p);
        adam.step(&mut p, &[Some(vec![0.5])]);
        let want = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - want).abs() < 1e-12);
        assert!((adam.first_moments()[0][0] - 0.05).abs() < 1e-15);
        assert!((adam.second_moments()[0][0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_reference_loop() {
        let grads = [0.3, -0.7];
        let mut p = scalar(2.0);
        let mut adam = Adam::new(0.05, &p);
        for g in grads {
            adam.step(&mut p, &[Some(vec![g])]);
        }
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.get("x").unwrap().data()[0] - x).abs() < 1e-12);
        assert_eq!(adam.steps_taken(), 2);
    }
}
