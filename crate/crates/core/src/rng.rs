//! Portable pseudo-random streams.
//!
//! Every randomized procedure in the toolkit draws from [`Pcg32`] (PCG-XSH-RR
//! 64/32, O'Neill 2014) seeded through [`splitmix64`], so a given seed yields
//! the same bytes on every platform and every release. Floats are built from
//! 53 random bits; bounded integers use rejection sampling.

/// PCG multiplier (Knuth's MMIX LCG constant).
pub const PCG_MULTIPLIER: u64 = 6_364_136_223_846_793_005;

/// One step of the SplitMix64 finalizer applied to `x + golden gamma`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream that processes record `index` under `global_seed`.
///
/// Streams derived this way are independent of scheduling, so parallel runs
/// reproduce sequential output byte for byte.
pub fn record_stream_seed(global_seed: u64, index: u64) -> u64 {
    splitmix64(global_seed ^ index)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
}

impl Pcg32 {
    /// Standard `pcg32_srandom_r(initstate, initseq)`.
    pub fn new(initstate: u64, initseq: u64) -> Self {
        let mut rng = Pcg32 {
            state: 0,
            inc: (initseq << 1) | 1,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(initstate);
        rng.next_u32();
        rng
    }

    /// Seeds from a single integer: `initstate = splitmix64(seed)`,
    /// `initseq = splitmix64(initstate)`.
    pub fn seed_from(seed: u64) -> Self {
        let initstate = splitmix64(seed);
        let initseq = splitmix64(initstate);
        Pcg32::new(initstate, initseq)
    }

    /// Generator for record `index` of a run seeded with `global_seed`.
    pub fn for_record(global_seed: u64, index: u64) -> Self {
        Pcg32::seed_from(record_stream_seed(global_seed, index))
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(PCG_MULTIPLIER).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    /// High word first.
    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, bound)`. Panics when `bound == 0`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0)");
        // Reject the top partial bucket so every residue is equally likely.
        let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % bound;
            }
        }
    }

    pub fn below_usize(&mut self, bound: usize) -> usize {
        self.below(bound as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
