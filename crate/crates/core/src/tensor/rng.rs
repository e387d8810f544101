//! Seeded pseudo-random stream.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood) so that any
//! implementation can regenerate a model dump from its manifest seed:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! return z ^ (z >> 31)
//! ```
//!
//! Uniform reals take the top 53 bits: `(z >> 11) * 2^-53`. Gaussian draws
//! use the Box-Muller cosine branch only (one normal per two uniforms), which
//! keeps the stream position independent of caching.

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed for a deterministic stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    /// Independent child seed for a numbered sub-stream.
    pub fn derive(self, stream: u64) -> Seed {
        let mut z = self.0 ^ stream.wrapping_add(1).wrapping_mul(GOLDEN);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }

    pub fn rng(self) -> SplitMix64 {
        SplitMix64 { state: self.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`, safe as a logarithm argument.
    #[inline]
    fn uniform_open(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift; bias below 2^-64 * n).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Laplace with unit scale `b` (variance `2b^2`), by inverse CDF.
    pub fn laplace(&mut self) -> f64 {
        let u = self.uniform() - 0.5;
        let mag = -(1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln();
        if u < 0.0 {
            -mag
        } else {
            mag
        }
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang; boosts shapes below one.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0);
            return g * self.uniform_open().powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d * v;
            }
        }
    }

    /// Student-t with `nu` degrees of freedom: `Z / sqrt(chi2(nu) / nu)`.
    pub fn student_t(&mut self, nu: f64) -> f64 {
        let z = self.normal();
        let chi2 = 2.0 * self.gamma(nu / 2.0);
        z / (chi2 / nu).sqrt()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // Published SplitMix64 outputs for seed 0.
        let mut r = Seed(0).rng();
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<f64> = {
            let mut r = Seed(42).rng();
            (0..100).map(|_| r.normal()).collect()
        };
        let b: Vec<f64> = {
            let mut r = Seed(42).rng();
            (0..100).map(|_| r.normal()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn derived_streams_differ() {
        let s = Seed(7);
        assert_ne!(s.derive(0), s.derive(1));
        assert_eq!(s.derive(3), s.derive(3));
    }

    #[test]
    fn sample_moments_are_sane() {
        let mut r = Seed(1).rng();
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);

        let gs: Vec<f64> = (0..n).map(|_| r.gamma(2.5)).collect();
        let gmean = gs.iter().sum::<f64>() / n as f64;
        assert!((gmean - 2.5).abs() < 0.03, "{gmean}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Seed(9).rng();
        for n in 1..50 {
            for _ in 0..20 {
                assert!(r.below(n) < n);
            }
        }
    }

    /// Closed-form CDF of Student-t with 5 degrees of freedom.
    fn t5_cdf(t: f64) -> f64 {
        let th = (t / 5f64.sqrt()).atan();
        let c2 = th.cos().powi(2);
        0.5 + (th + th.sin() * th.cos() * (1.0 + 2.0 / 3.0 * c2)) / std::f64::consts::PI
    }

    #[test]
    fn student_t_matches_its_cdf() {
        let n = 200_000;
        let mut r = Seed(21).rng();
        let mut v: Vec<f64> = (0..n).map(|_| r.student_t(5.0)).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        let ks = v
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = t5_cdf(x);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // 1.63 / sqrt(n) is the 1% critical value.
        assert!(ks < 1.63 / (n as f64).sqrt(), "KS statistic {ks}");
    }
}
