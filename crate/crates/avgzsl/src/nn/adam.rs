//! Adam optimizer with bias correction, operating on flat parameter slices.

use super::mat::Mat;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// State is allocated per parameter tensor, matching the order in which
    /// `step` will receive them.
    pub fn new(lr: f64, beta1: f64, beta2: f64, param_sizes: &[usize]) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(lr: f64, beta1: f64, beta2: f64, params: &[&Mat]) -> Adam {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Adam::new(lr, beta1, beta2, &sizes)
    }

    /// One update step. `params` and `grads` must match the sizes passed at
    /// construction, in the same order.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(param.len(), grad.len(), "parameter/gradient size mismatch");
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        // f(p) = sum (p - target)^2, gradient 2(p - target).
        let target = [3.0, -1.5, 0.25];
        let mut p = Mat::from_vec(1, 3, vec![0.0; 3]);
        let mut opt = Adam::for_params(0.05, 0.9, 0.999, &[&p]);
        for _ in 0..2000 {
            let grad: Vec<f64> =
                p.data.iter().zip(target).map(|(&pi, ti)| 2.0 * (pi - ti)).collect();
            opt.step(&mut [&mut p], &[grad]);
        }
        for (pi, ti) in p.data.iter().zip(target) {
            assert!((pi - ti).abs() < 1e-4, "got {pi}, want {ti}");
        }
    }

    #[test]
    fn first_step_has_unit_scale() {
        // With bias correction the very first update is lr * sign(grad),
        // independent of gradient magnitude.
        let mut p = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let mut opt = Adam::new(0.01, 0.9, 0.999, &[2]);
        opt.step(&mut [&mut p], &[vec![1e-4, -250.0]]);
        assert!((p.data[0] + 0.01).abs() < 1e-6);
        assert!((p.data[1] - 0.01).abs() < 1e-6);
    }
}
