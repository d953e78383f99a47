//! Counter-based hashing used for synthetic token content and prefix
//! hash chains. splitmix64 keeps every derived stream deterministic and
//! platform-independent.

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Folds a sequence of words into one hash, order-sensitively.
pub(crate) fn mix(seed: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &w in words {
        h = splitmix64(h ^ w.wrapping_mul(0x2545_f491_4f6c_dd1d));
    }
    h
}

/// Maps a hash to a float uniform in (-1, 1), excluding exact zero.
pub(crate) fn unit_interval(h: u64) -> f32 {
    // 24 mantissa bits, offset by half a step to avoid 0.0 and +/-1.0.
    let u = ((h >> 40) as f32 + 0.5) / (1u64 << 24) as f32;
    2.0 * u - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_is_order_sensitive() {
        assert_ne!(mix(1, &[2, 3]), mix(1, &[3, 2]));
        assert_ne!(mix(1, &[2]), mix(2, &[2]));
    }

    #[test]
    fn unit_interval_in_open_range() {
        for i in 0..1000u64 {
            let v = unit_interval(splitmix64(i));
            assert!(v > -1.0 && v < 1.0, "v={v}");
            assert_ne!(v, 0.0, "half-step offset keeps values away from zero");
        }
    }
}
