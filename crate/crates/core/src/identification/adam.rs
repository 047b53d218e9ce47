use serde::{Deserialize, Serialize};

/// Adam with bias correction. Masked-out coordinates never move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam { learning_rate, beta1, beta2, epsilon, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], mask: &[bool]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first step is lr·g/|g| regardless of scale.
        let mut a = Adam::new(2, 0.01, 0.9, 0.999, 1e-8);
        let mut p = [1.0, -2.0];
        a.step(&mut p, &[300.0, -0.002], &[true, true]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-5);
    }

    #[test]
    fn masked_coordinates_are_frozen() {
        let mut a = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = [1.0, 1.0];
        for _ in 0..10 {
            a.step(&mut p, &[1.0, 1.0], &[true, false]);
        }
        assert_eq!(p[1], 1.0);
        assert!(p[0] < 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(1, 0.05, 0.9, 0.999, 1e-8);
        let mut x = [3.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 0.5)];
            a.step(&mut x, &g, &[true]);
        }
        assert!((x[0] - 0.5).abs() < 1e-3);
    }
}
