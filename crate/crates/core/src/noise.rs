//! Counter-based Gaussian noise.
//!
//! Every Brownian increment is a pure function of (master seed, path id,
//! step index), so paths can be generated in any order, on any number of
//! threads, or regenerated on demand, always with identical bits. The
//! counter word goes through two rounds of the splitmix64 finalizer with a
//! golden-ratio stride between the coordinates, then maps to a uniform in
//! the open unit interval and through the normal quantile function.

use statrs::distribution::{ContinuousCDF, Normal};

const PHI: u64 = 0x9e3779b97f4a7c15;

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stateless generator for one master seed. Cheap to copy; all methods are
/// pure functions of their arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    master: u64,
}

impl NoiseStream {
    pub fn new(master: u64) -> Self {
        NoiseStream { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Derive an independent stream for auxiliary sampling (for example a
    /// pilot ensemble) that never collides with the parent's counters.
    pub fn substream(&self, tag: u64) -> NoiseStream {
        NoiseStream { master: mix64(self.master ^ tag.wrapping_mul(PHI) ^ 0xd1b54a32d192ed03) }
    }

    /// The mixed 64-bit counter word for (path, index).
    #[inline]
    pub fn raw(&self, path: u64, index: u64) -> u64 {
        let inner = mix64(self.master.wrapping_add(PHI.wrapping_mul(path)));
        mix64(inner.wrapping_add(PHI.wrapping_mul(index)).wrapping_add(1))
    }

    /// Uniform draw in the open interval (0, 1), from the top 53 bits.
    #[inline]
    pub fn uniform(&self, path: u64, index: u64) -> f64 {
        ((self.raw(path, index) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw by inverse transform.
    #[inline]
    pub fn gaussian(&self, path: u64, index: u64) -> f64 {
        let std = Normal::new(0.0, 1.0).unwrap();
        std.inverse_cdf(self.uniform(path, index))
    }

    pub fn fill_gaussians(&self, path: u64, out: &mut [f64]) {
        let std = Normal::new(0.0, 1.0).unwrap();
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = std.inverse_cdf(self.uniform(path, i as u64));
        }
    }

    /// Brownian increments over a grid with step `h`: sqrt(h) times a
    /// standard normal per slot.
    pub fn fill_increments(&self, path: u64, h: f64, out: &mut [f64]) {
        self.fill_gaussians(path, out);
        let scale = h.sqrt();
        for slot in out.iter_mut() {
            *slot *= scale;
        }
    }
}
