use super::unet::{Grads, Params};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::unet::Param;

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = Params {
            tensors: vec![Param { name: "w".into(), shape: vec![3], data: vec![1.0, -2.0, 0.5] }],
        };
        let mut adam = Adam::new(&params);
        adam.update(&mut params, &vec![vec![0.3, -4.0, 0.0]], 0.01);
        // Bias-corrected first step is lr * sign(g) for non-zero g.
        assert!((params.tensors[0].data[0] - 0.99).abs() < 1e-6);
        assert!((params.tensors[0].data[1] - -1.99).abs() < 1e-6);
        assert_eq!(params.tensors[0].data[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = Params { tensors: vec![Param { name: "x".into(), shape: vec![1], data: vec![3.0] }] };
        let mut adam = Adam::new(&params);
        for _ in 0..2000 {
            let x = params.tensors[0].data[0];
            adam.update(&mut params, &vec![vec![2.0 * (x - 1.0)]], 0.05);
        }
        assert!((params.tensors[0].data[0] - 1.0).abs() < 1e-2);
    }
}
