//! Matrix-adaptation evolution strategy (MA-ES).
//!
//! A (μ/μ_w, λ) strategy that adapts a transformation matrix `M` directly
//! instead of a covariance matrix, so no eigendecomposition is needed. The
//! update uses rank-one products only, costing O(μ·n²) per generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct MaEs {
    n: usize,
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_s: f64,
    c_1: f64,
    c_mu: f64,
    d_sigma: f64,
    chi_n: f64,
    mean: Vec<f64>,
    sigma: f64,
    /// Per-coordinate step scale applied on top of `M`.
    scale: Vec<f64>,
    /// Row-major n×n.
    m: Vec<f64>,
    s: Vec<f64>,
    rng: ChaCha8Rng,
    z: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
}

impl MaEs {
    pub fn new(mean: Vec<f64>, sigma: f64, scale: Vec<f64>, lambda: usize, seed: u64) -> Self {
        let n = mean.len();
        let lambda = lambda.max(1);
        let mu = (lambda / 2).max(1);
        let raw: Vec<f64> = (1..=mu).map(|i| ((mu as f64 + 0.5).ln() - (i as f64).ln()).max(0.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = if total > 0.0 { raw.iter().map(|w| w / total).collect() } else { vec![1.0 / mu as f64; mu] };
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let c_s = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff)).max(0.0);
        let d_sigma = 1.0 + c_s + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0);
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        MaEs {
            n,
            lambda,
            mu,
            weights,
            mu_eff,
            c_s,
            c_1,
            c_mu,
            d_sigma,
            chi_n,
            mean,
            sigma,
            scale,
            m,
            s: vec![0.0; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
            z: Vec::new(),
            d: Vec::new(),
        }
    }

    /// Default population size 4 + ⌊3·ln n⌋.
    pub fn default_lambda(n: usize) -> usize {
        4 + (3.0 * (n.max(1) as f64).ln()).floor() as usize
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Draws a generation of candidates.
    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        let n = self.n;
        self.z.clear();
        self.d.clear();
        let mut out = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
            let d: Vec<f64> = (0..n).map(|i| self.m[i * n..(i + 1) * n].iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
            let y: Vec<f64> = (0..n).map(|i| self.mean[i] + self.sigma * self.scale[i] * d[i]).collect();
            self.z.push(z);
            self.d.push(d);
            out.push(y);
        }
        out
    }

    /// Updates the search distribution from the fitness of the last `ask`.
    /// Lower fitness is better; ties keep candidate order.
    pub fn tell(&mut self, fitness: &[f64]) {
        let n = self.n;
        assert_eq!(fitness.len(), self.z.len(), "tell needs one fitness per candidate");
        let mut order: Vec<usize> = (0..fitness.len()).collect();
        order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
        let sel = &order[..self.mu];

        let mut dz = vec![0.0; n];
        let mut dd = vec![0.0; n];
        for (w, &k) in self.weights.iter().zip(sel) {
            for i in 0..n {
                dz[i] += w * self.z[k][i];
                dd[i] += w * self.d[k][i];
            }
        }
        for i in 0..n {
            self.mean[i] += self.sigma * self.scale[i] * dd[i];
        }
        let c = (self.mu_eff * self.c_s * (2.0 - self.c_s)).sqrt();
        for i in 0..n {
            self.s[i] = (1.0 - self.c_s) * self.s[i] + c * dz[i];
        }

        // M ← M·(I + c1/2·(s sᵀ − I) + cμ/2·(Σ w z zᵀ − I))
        //   = (1 − c1/2 − cμ/2)·M + c1/2·(M s) sᵀ + cμ/2·Σ w (M z) zᵀ
        if self.c_1 > 0.0 || self.c_mu > 0.0 {
            let ms: Vec<f64> = (0..n).map(|i| self.m[i * n..(i + 1) * n].iter().zip(&self.s).map(|(a, b)| a * b).sum()).collect();
            let keep = 1.0 - 0.5 * self.c_1 - 0.5 * self.c_mu;
            for i in 0..n {
                let row = &mut self.m[i * n..(i + 1) * n];
                let a = 0.5 * self.c_1 * ms[i];
                for j in 0..n {
                    row[j] = keep * row[j] + a * self.s[j];
                }
            }
            if self.c_mu > 0.0 {
                for (w, &k) in self.weights.iter().zip(sel) {
                    let (d, z) = (&self.d[k], &self.z[k]);
                    for i in 0..n {
                        let a = 0.5 * self.c_mu * w * d[i];
                        if a == 0.0 {
                            continue;
                        }
                        let row = &mut self.m[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] += a * z[j];
                        }
                    }
                }
            }
        }
        let norm = self.s.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.sigma *= ((self.c_s / self.d_sigma) * (norm / self.chi_n - 1.0)).exp();
    }
}
