//! Deterministic RNG used by every stochastic operation in the crate.
//!
//! All randomness flows through [`Rng`] (xoshiro256++) seeded via SplitMix64,
//! so runs are bit-reproducible across platforms and independent of any
//! external crate's version. Substreams are derived with [`derive_seed`] from
//! a master seed plus a purpose tag, never by reusing one stream across
//! unrelated call sites.

/// One step of SplitMix64. Used for seed expansion and seed derivation.
pub fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
}

/// Finalizer of SplitMix64: maps the raw counter state to an output word.
fn splitmix64_out(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes; used for tag hashing and content checksums.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives an independent substream seed from a master seed, a purpose tag,
/// and any number of integer qualifiers (task id, class id, epoch, ...).
///
/// Same inputs always give the same output; any change to tag or words gives
/// an unrelated seed.
pub fn derive_seed(master: u64, tag: &str, words: &[u64]) -> u64 {
    let mut s = master ^ fnv1a(tag.as_bytes());
    splitmix64(&mut s);
    let mut out = splitmix64_out(s);
    for &w in words {
        s ^= splitmix64_out(w ^ out);
        splitmix64(&mut s);
        out = splitmix64_out(s);
    }
    out
}

/// xoshiro256++ generator.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Seeds the four state words by running SplitMix64 from `seed`.
    pub fn seed_from(seed: u64) -> Self {
        let mut st = seed;
        let mut s = [0u64; 4];
        for w in &mut s {
            splitmix64(&mut st);
            *w = splitmix64_out(st);
        }
        // All-zero state would be a fixed point; SplitMix64 cannot produce
        // four zero words from any seed, but guard anyway.
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let [s0, s1, s2, s3] = self.s;
        let result = s0.wrapping_add(s3).rotate_left(23).wrapping_add(s0);
        let t = s1 << 17;
        let mut s2n = s2 ^ s0;
        let s3n = s3 ^ s1;
        let s1n = s1 ^ s2n;
        let s0n = s0 ^ s3n;
        s2n ^= t;
        self.s = [s0n, s1n, s2n, s3n.rotate_left(45)];
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is meaningless");
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Draws `k` distinct indices from [0, n) in random order. `k <= n`.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct from {n}");
        let mut all: Vec<usize> = (0..n).collect();
        self.shuffle(&mut all);
        all.truncate(k);
        all
    }
}
