//! Counter-based random streams.
//!
//! Every draw is `mix(key + (index + 1) * GOLDEN)` where `key` is derived from
//! `(master_seed, purpose, iteration, layer)`. A stream therefore has no hidden
//! state beyond its draw index, and the noise for layer `m` at iteration `t` is
//! the same no matter which thread computes it or in which order.
//!
//! Transcendentals go through `libm` so Box–Muller output is bit-identical
//! across platforms.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// What a stream is used for. Distinct purposes yield independent keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Init,
    Sampling,
    Noise,
    Attack,
    Data,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x494E_4954,
            Purpose::Sampling => 0x5341_4D50,
            Purpose::Noise => 0x4E4F_4953,
            Purpose::Attack => 0x4154_5441,
            Purpose::Data => 0x4441_5441,
        }
    }
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn absorb(key: u64, word: u64) -> u64 {
    mix64(key ^ mix64(word.wrapping_add(GOLDEN)))
}

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    purpose: Purpose,
    iteration: u64,
    layer: u64,
    key: u64,
    index: u64,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(master_seed: u64, purpose: Purpose, iteration: u64, layer: u64) -> Self {
        let mut key = mix64(master_seed ^ 0x6A09_E667_F3BC_C908);
        key = absorb(key, purpose.tag());
        key = absorb(key, iteration);
        key = absorb(key, layer);
        Self {
            master_seed,
            purpose,
            iteration,
            layer,
            key,
            index: 0,
            spare_normal: None,
        }
    }

    /// Fresh stream at new counters, same seed and purpose.
    pub fn derive(&self, iteration: u64, layer: u64) -> Self {
        Self::new(self.master_seed, self.purpose, iteration, layer)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    pub fn counters(&self) -> (u64, u64) {
        (self.iteration, self.layer)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.index = self.index.wrapping_add(1);
        mix64(self.key.wrapping_add(self.index.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    fn next_f64_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by rejection, free of modulo bias.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound) - 1;
        loop {
            let v = self.next_u64();
            if v <= zone || zone == u64::MAX - 1 && bound.is_power_of_two() {
                return v % bound;
            }
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw via Box–Muller; both outputs of a pair are used.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64_open0();
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}

/// I.i.d. `N(0, stddev²)` tensor.
pub fn gaussian(rng: &mut RngStream, stddev: f64, shape: &[usize]) -> Result<Tensor> {
    if !(stddev >= 0.0) || !stddev.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian stddev must be finite and non-negative, got {stddev}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = if stddev == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| stddev * rng.next_normal()).collect()
    };
    Tensor::new(shape.to_vec(), data)
}

/// Fills `out` with `N(0, stddev²)` draws.
pub fn fill_gaussian(rng: &mut RngStream, stddev: f64, out: &mut [f64]) {
    if stddev == 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in out.iter_mut() {
        *v = stddev * rng.next_normal();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_counters_same_sequence() {
        let mut a = RngStream::new(42, Purpose::Noise, 3, 1);
        let mut b = RngStream::new(42, Purpose::Noise, 3, 1);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ga = gaussian(&mut a, 1.5, &[4, 5]).unwrap();
        let gb = gaussian(&mut b, 1.5, &[4, 5]).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn derive_matches_fresh_stream() {
        let base = RngStream::new(7, Purpose::Attack, 0, 0);
        let mut d = base.derive(9, 2);
        let mut f = RngStream::new(7, Purpose::Attack, 9, 2);
        assert_eq!(d.next_u64(), f.next_u64());
        assert_eq!(d.counters(), (9, 2));
    }

    #[test]
    fn purposes_and_counters_decorrelate() {
        let n = 20_000;
        let draws = |p, it, l| {
            let mut r = RngStream::new(1, p, it, l);
            (0..n).map(|_| r.next_f64() - 0.5).collect::<Vec<_>>()
        };
        let a = draws(Purpose::Noise, 0, 0);
        for b in [
            draws(Purpose::Sampling, 0, 0),
            draws(Purpose::Noise, 1, 0),
            draws(Purpose::Noise, 0, 1),
        ] {
            let corr: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64 * 12.0;
            // sd of the estimator is 1/sqrt(n) ≈ 0.007
            assert!(corr.abs() < 0.04, "correlation {corr}");
        }
    }

    #[test]
    fn zero_stddev_gives_zeros() {
        let mut r = RngStream::new(0, Purpose::Noise, 0, 0);
        let t = gaussian(&mut r, 0.0, &[3, 3]).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_stddev_rejected() {
        let mut r = RngStream::new(0, Purpose::Noise, 0, 0);
        assert!(matches!(
            gaussian(&mut r, -1.0, &[2]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn gaussian_moments() {
        let n = 1_000_000;
        let mut r = RngStream::new(2024, Purpose::Noise, 0, 0);
        let t = gaussian(&mut r, 2.0, &[n]).unwrap();
        let mean = t.as_slice().iter().sum::<f64>() / n as f64;
        let var = t.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 4.0).abs() / 4.0 < 0.02, "variance {var}");
        assert!(mean.abs() < 5.0 * 2.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn next_below_covers_range() {
        let mut r = RngStream::new(5, Purpose::Sampling, 0, 0);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[r.next_below(7) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
        for _ in 0..100 {
            assert!(r.next_below(1) == 0);
        }
    }
}
