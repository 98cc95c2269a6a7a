//! Adam with bias correction, kept deliberately minimal: a list of moment
//! buffers matching a fixed list of parameter tensors.

use crate::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam<R> {
    pub t: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            t: 0,
            m: shapes.iter().map(|&n| vec![R::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![R::zero(); n]).collect(),
        }
    }

    pub fn for_tensors(tensors: &[&[R]]) -> Self {
        Adam::new(&tensors.iter().map(|t| t.len()).collect::<Vec<_>>())
    }

    /// One update over all registered tensors. `params[i]` and `grads[i]`
    /// must match the shape the optimizer was built with.
    pub fn step(&mut self, params: &mut [&mut [R]], grads: &[&[R]], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = R::of(ADAM_BETA1);
        let b2 = R::of(ADAM_BETA2);
        let eps = R::of(ADAM_EPS);
        let one = R::one();
        // Bias-corrected step size.
        let corr = lr * (1.0 - ADAM_BETA2.powi(self.t as i32)).sqrt()
            / (1.0 - ADAM_BETA1.powi(self.t as i32));
        let lr_t = R::of(corr);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), m.len());
            assert_eq!(g.len(), m.len());
            for i in 0..p.len() {
                let grad = g[i];
                m[i] = b1 * m[i] + (one - b1) * grad;
                v[i] = b2 * v[i] + (one - b2) * grad * grad;
                p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
    }

    pub fn moments(&self) -> (&[Vec<R>], &[Vec<R>]) {
        (&self.m, &self.v)
    }

    pub fn restore(t: u64, m: Vec<Vec<R>>, v: Vec<Vec<R>>) -> Self {
        Adam { t, m, v }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut opt = Adam::<f64>::new(&[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let orig = p.clone();
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], 0.1);
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn constant_gradient_step_approaches_lr_times_sign() {
        // With g constant, m -> g and v -> g², so the update -> lr * sign(g).
        let mut opt = Adam::<f64>::new(&[2]);
        let mut p = vec![0.0, 0.0];
        let g = [0.03, -4.0];
        let lr = 0.01;
        let mut prev = p.clone();
        let mut last_delta = [0.0; 2];
        for _ in 0..2000 {
            opt.step(&mut [&mut p], &[&g], lr);
            last_delta = [p[0] - prev[0], p[1] - prev[1]];
            prev = p.clone();
        }
        assert!((last_delta[0] + lr).abs() < 1e-4, "{last_delta:?}");
        assert!((last_delta[1] - lr).abs() < 1e-4, "{last_delta:?}");
    }

    #[test]
    fn trajectories_are_deterministic() {
        let run = || {
            let mut opt = Adam::<f32>::new(&[4]);
            let mut p = vec![0.1f32, 0.2, 0.3, 0.4];
            for k in 0..100 {
                let g: Vec<f32> = (0..4).map(|i| ((k * 7 + i * 3) % 11) as f32 * 0.01 - 0.05).collect();
                opt.step(&mut [&mut p], &[&g], 0.003);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
