//! Fully connected ReLU networks with a linear output and an input normalizer.
//!
//! Parameters are stored flat, layer by layer: the weight matrix in row-major
//! `(out, in)` order followed by the bias vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Per-feature affine map `x ↦ (x − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(n: usize) -> Self {
        Normalizer { mean: vec![0.0; n], scale: vec![1.0; n] }
    }

    /// Mean and population standard deviation of each column. Constant columns
    /// get scale 1 so the map stays invertible.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Usage("cannot fit a normalizer on no samples".into()));
        };
        let n = first.len();
        let count = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for r in rows {
            if r.len() != n {
                return Err(Error::Usage("normalizer samples have ragged widths".into()));
            }
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for r in rows {
            for k in 0..n {
                var[k] += (r[k] - mean[k]).powi(2);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 1e-12 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalizer { mean, scale })
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.mean.len() != width || self.scale.len() != width {
            return Err(Error::Usage(format!("normalizer width differs from input width {width}")));
        }
        if self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Usage("normalizer scales must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
    pub normalizer: Option<Normalizer>,
}

/// Number of weights and biases for the given layer widths.
pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero network without a normalizer.
    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)], normalizer: None }
    }

    /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn glorot(sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-limit..=limit));
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Mlp { sizes: sizes.to_vec(), params, normalizer: None }
    }

    pub fn with_normalizer(mut self, n: Normalizer) -> Self {
        self.normalizer = Some(n);
        self
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.iter().any(|&s| s == 0) || *self.sizes.last().unwrap() != 1 {
            return Err(Error::Usage(format!("invalid layer sizes {:?}", self.sizes)));
        }
        if self.params.len() != param_count(&self.sizes) {
            return Err(Error::Usage(format!(
                "network {:?} needs {} parameters, got {}",
                self.sizes,
                param_count(&self.sizes),
                self.params.len()
            )));
        }
        if let Some(n) = &self.normalizer {
            n.validate(self.sizes[0])?;
        }
        Ok(())
    }

    fn normalizer(&self) -> Result<&Normalizer> {
        self.normalizer
            .as_ref()
            .ok_or_else(|| Error::Usage("network input normalizer has not been fitted".into()))
    }

    /// Scalar output for one input row, with parameters supplied separately so
    /// they can live on a tape.
    pub fn forward_with<T: Real>(&self, params: &[T], input: &[T]) -> Result<T> {
        let norm = self.normalizer()?;
        if input.len() != self.sizes[0] || params.len() != self.params.len() {
            return Err(Error::Usage("network input or parameter width mismatch".into()));
        }
        let mut x: Vec<T> = input
            .iter()
            .enumerate()
            .map(|(k, &v)| (v - norm.mean[k]) * (1.0 / norm.scale[k]))
            .collect();
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut y = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                let mut acc = bias[o];
                for (wi, xi) in row.iter().zip(&x) {
                    acc = acc + *wi * *xi;
                }
                y.push(if l + 1 < layers { acc.relu() } else { acc });
            }
            x = y;
        }
        Ok(x[0])
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        self.forward_with(&self.params, input)
    }

    /// Mean squared error over a batch and its gradient with respect to the
    /// flat parameters, by explicit backpropagation. `inputs` are raw rows and
    /// go through the normalizer.
    pub fn mse_and_gradient(&self, inputs: &[&[f64]], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let norm = self.normalizer()?;
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::Usage("batch inputs and targets must be non-empty and aligned".into()));
        }
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let scale = 1.0 / targets.len() as f64;
        let mut acts: Vec<Vec<f64>> = self.sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut pre: Vec<Vec<f64>> = self.sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut delta: Vec<Vec<f64>> = self.sizes.iter().map(|&s| vec![0.0; s]).collect();
        for (row, &target) in inputs.iter().zip(targets) {
            for k in 0..self.sizes[0] {
                acts[0][k] = (row[k] - norm.mean[k]) * (1.0 / norm.scale[k]);
            }
            for l in 0..layers {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let w = &self.params[offsets[l]..offsets[l] + n_in * n_out];
                let b = &self.params[offsets[l] + n_in * n_out..offsets[l] + n_in * n_out + n_out];
                let (lo, hi) = acts.split_at_mut(l + 1);
                let x = &lo[l];
                let y = &mut hi[0];
                for o in 0..n_out {
                    let z = b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                    pre[l + 1][o] = z;
                    y[o] = if l + 1 < layers { z.max(0.0) } else { z };
                }
            }
            let err = acts[layers][0] - target;
            loss += err * err * scale;
            delta[layers][0] = 2.0 * err * scale;
            for l in (0..layers).rev() {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let wo = offsets[l];
                let bo = wo + n_in * n_out;
                for o in 0..n_out {
                    let d = delta[l + 1][o];
                    if d == 0.0 {
                        continue;
                    }
                    grad[bo + o] += d;
                    let gw = &mut grad[wo + o * n_in..wo + (o + 1) * n_in];
                    for (g, a) in gw.iter_mut().zip(&acts[l]) {
                        *g += d * a;
                    }
                }
                if l == 0 {
                    break;
                }
                let (lo, hi) = delta.split_at_mut(l + 1);
                let din = &mut lo[l];
                din.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..n_out {
                    let d = hi[0][o];
                    if d == 0.0 {
                        continue;
                    }
                    let w = &self.params[wo + o * n_in..wo + (o + 1) * n_in];
                    for (di, wi) in din.iter_mut().zip(w) {
                        *di += d * wi;
                    }
                }
                // ReLU derivative, interior branch at zero.
                for (di, z) in din.iter_mut().zip(&pre[l]) {
                    if *z < 0.0 {
                        *di = 0.0;
                    }
                }
            }
        }
        Ok((loss, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Tape};

    #[test]
    fn counts() {
        assert_eq!(param_count(&[3, 32, 32, 1]), 1217);
        assert_eq!(param_count(&[2, 128, 64, 1]), 8705);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = Mlp::zeros(&[3, 32, 32, 1]).with_normalizer(Normalizer::identity(3));
        assert_eq!(m.forward(&[0.4, -2.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn missing_normalizer_is_a_usage_error() {
        let m = Mlp::zeros(&[3, 4, 1]);
        assert!(matches!(m.forward(&[0.0; 3]), Err(Error::Usage(_))));
    }

    #[test]
    fn hand_evaluated_single_neuron() {
        // [3, 1, 1] with unit weights: hidden = relu(1 + 0 + 0) = 1, out = 1 * 1 = 1.
        let mut m = Mlp::zeros(&[3, 1, 1]).with_normalizer(Normalizer::identity(3));
        m.params = vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(m.forward(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
        // Negative pre-activation is rectified away.
        assert_eq!(m.forward(&[-1.0, -1.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn normalizer_consistency() {
        // A network with normalizer (mean, 1) equals one with identity
        // normalizer whose first-layer bias absorbs −W·mean.
        let mean = vec![0.3, -1.2, 2.5];
        let a = Mlp::glorot(&[3, 8, 1], 4).with_normalizer(Normalizer { mean: mean.clone(), scale: vec![1.0; 3] });
        let mut b = a.clone();
        b.normalizer = Some(Normalizer::identity(3));
        for o in 0..8 {
            let shift: f64 = (0..3).map(|k| a.params[o * 3 + k] * mean[k]).sum();
            b.params[24 + o] -= shift;
        }
        for x in [[0.0, 0.0, 0.0], [1.0, 2.0, -3.0], [0.3, -1.2, 2.5]] {
            let ya = a.forward(&x).unwrap();
            let yb = b.forward(&x).unwrap();
            assert!((ya - yb).abs() < 1e-12);
        }
    }

    #[test]
    fn glorot_is_seeded_and_bounded() {
        let a = Mlp::glorot(&[3, 32, 32, 1], 11);
        assert_eq!(a, Mlp::glorot(&[3, 32, 32, 1], 11));
        assert_ne!(a.params, Mlp::glorot(&[3, 32, 32, 1], 12).params);
        let limit = (6.0f64 / 35.0).sqrt();
        assert!(a.params[..96].iter().all(|w| w.abs() <= limit));
        assert!(a.params[96..128].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn fitted_normalizer_standardizes() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 5.0]).collect();
        let n = Normalizer::fit(&rows).unwrap();
        assert!((n.mean[0] - 4.5).abs() < 1e-12);
        assert!((n.scale[0] - 8.25f64.sqrt()).abs() < 1e-12);
        assert_eq!(n.scale[1], 1.0);
        assert!(Normalizer::fit(&[]).is_err());
    }

    #[test]
    fn analytic_backprop_matches_tape() {
        let mut m = Mlp::glorot(&[2, 16, 8, 1], 3);
        m.params.iter_mut().enumerate().for_each(|(i, p)| *p += 0.01 * (i as f64).sin());
        m.normalizer = Some(Normalizer { mean: vec![0.1, -0.5], scale: vec![0.7, 2.0] });
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 0.37).sin(), i as f64 * 0.5 - 3.0]).collect();
        let targets: Vec<f64> = rows.iter().map(|r| r[0] * 2.0 - 0.3 * r[1]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let (loss, grad) = m.mse_and_gradient(&refs, &targets).unwrap();

        let tape = Tape::new();
        let ps = tape.vars(&m.params);
        let mut total = crate::autodiff::Var::constant(0.0);
        for (r, &t) in rows.iter().zip(&targets) {
            let x: Vec<_> = r.iter().map(|&v| crate::autodiff::Var::constant(v)).collect();
            let y = m.forward_with(&ps, &x).unwrap();
            total = total + (y - t).square();
        }
        let total = total * (1.0 / rows.len() as f64);
        let g = backward(&tape, total, &ps).unwrap();
        assert!((total.value() - loss).abs() < 1e-12 * loss.max(1.0));
        for (a, b) in grad.iter().zip(&g.0) {
            assert!((a - b).abs() < 1e-11 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
