//! Deterministic random number streams.
//!
//! Two flavors cover every use of randomness in the crate:
//!
//! - [`CounterRng`]: a pure counter-based stream. Each draw is a function of
//!   `(seed, stream tags, counter)` only, so parallel consumers (Langevin
//!   chains, per-sample noise) produce identical values regardless of
//!   scheduling order.
//! - [`StreamRng`]: a small sequential generator for shuffles and parameter
//!   initialization, seeded by the same tag-mixing scheme.
//!
//! Both are built on the splitmix64 finalizer. Not cryptographically secure.

/// One splitmix64 step: advance-by-golden-gamma then finalize.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with a list of stream tags into a single 64-bit key.
pub fn mix_key(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x243F_6A88_85A3_08D3);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t));
    }
    h
}

/// Counter-based stream: `value(counter)` is pure and random-access.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, tags: &[u64]) -> Self {
        Self {
            key: mix_key(seed, tags),
        }
    }

    #[inline]
    pub fn value(&self, counter: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(counter.wrapping_mul(0xD1B5_4A32_D192_ED03)))
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        (self.value(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal pair via Box–Muller. One counter yields two values.
    #[inline]
    pub fn gauss_pair(&self, counter: u64) -> (f64, f64) {
        let a = self.value(counter.wrapping_mul(2));
        let b = self.value(counter.wrapping_mul(2).wrapping_add(1));
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Fill `out` with standard normals, consuming counters
    /// `base, base+1, ...` in pairs.
    pub fn fill_gauss(&self, base: u64, out: &mut [f64]) {
        let mut i = 0;
        let mut c = base;
        while i < out.len() {
            let (z0, z1) = self.gauss_pair(c);
            out[i] = z0;
            if i + 1 < out.len() {
                out[i + 1] = z1;
            }
            i += 2;
            c = c.wrapping_add(1);
        }
    }
}

/// Sequential splitmix64 stream for shuffles and initialization.
#[derive(Debug, Clone)]
pub struct StreamRng {
    state: u64,
    spare_gauss: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64, tags: &[u64]) -> Self {
        Self {
            state: mix_key(seed, tags),
            spare_gauss: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        splitmix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection-free modulo (n small here).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box–Muller with a cached spare.
    pub fn gauss(&mut self) -> f64 {
        if let Some(z) = self.spare_gauss.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_stream_is_pure() {
        let rng = CounterRng::new(7, &[1, 2]);
        let a: Vec<u64> = (0..32).map(|c| rng.value(c)).collect();
        let b: Vec<u64> = (0..32).map(|c| rng.value(c)).collect();
        assert_eq!(a, b);
        // Order of evaluation is irrelevant.
        let rev: Vec<u64> = (0..32).rev().map(|c| rng.value(c)).collect();
        assert_eq!(a, rev.into_iter().rev().collect::<Vec<_>>());
    }

    #[test]
    fn distinct_tags_give_distinct_streams() {
        let a = CounterRng::new(7, &[1]);
        let b = CounterRng::new(7, &[2]);
        assert_ne!(a.value(0), b.value(0));
        let c = CounterRng::new(8, &[1]);
        assert_ne!(a.value(0), c.value(0));
    }

    #[test]
    fn gauss_moments_are_sane() {
        let rng = CounterRng::new(123, &[9]);
        let n = 200_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut buf = vec![0.0; 2];
        for c in 0..(n / 2) as u64 {
            rng.fill_gauss(c.wrapping_mul(17), &mut buf);
            for &z in &buf {
                sum += z;
                sumsq += z * z;
            }
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation_and_deterministic() {
        let mut r1 = StreamRng::new(5, &[0xA]);
        let mut r2 = StreamRng::new(5, &[0xA]);
        let mut a: Vec<usize> = (0..100).collect();
        let mut b: Vec<usize> = (0..100).collect();
        r1.shuffle(&mut a);
        r2.shuffle(&mut b);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
