/// Derives a child seed from a master seed and a counter, so that parallel
/// and serial executions of indexed work items draw identical randomness.
///
/// SplitMix64 finalizer over the combined word; statistically independent
/// streams for distinct counters.
pub(crate) fn mix_seed(master: u64, counter: u64) -> u64 {
    let mut z = master ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
