//! Deterministic derivation of independent stream seeds.

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` under `master`; independent of thread count and order.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master) ^ mix64(index.wrapping_add(0xA5A5_5A5A_0F0F_F0F0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        let a: Vec<u64> = (0..1000).map(|i| stream_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), a.len());
        assert_ne!(stream_seed(7, 0), stream_seed(8, 0));
    }
}
