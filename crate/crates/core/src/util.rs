//! Small shared utilities: seed derivation, stable hashing, bounded fan-out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a sequence of components into one 64-bit seed (splitmix64 chain).
///
/// Used to derive independent, reproducible RNG streams from a global seed
/// plus structural coordinates (domain index, record index, epoch, ...).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// Seeds a ChaCha8 stream from mixed components. ChaCha8 is used everywhere
/// so generated bytes are identical across platforms and crate versions.
pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stable 64-bit seed component for a string id.
pub fn seed_of_str(s: &str) -> u64 {
    fnv1a64(s.as_bytes())
}

/// FNV-1a 64-bit hash. Used for manifest provenance hashes and id-derived
/// seeds; not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Maps `f` over `0..n`, fanning out across at most `threads` workers.
/// Outputs are collected by index, so the result is independent of the
/// thread count as long as `f` is pure.
pub fn parallel_map<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, s) in slot.iter_mut().enumerate() {
                    *s = Some(f(w * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled slot")).collect()
}
