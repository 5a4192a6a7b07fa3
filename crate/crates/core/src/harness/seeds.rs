//! Independent RNG streams derived from the root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Market = 1,
    Init = 2,
    Shuffle = 3,
    PseudoPath = 4,
    PseudoNoise = 5,
    CurvatureInit = 6,
}

/// SplitMix64 finalizer applied to the root seed and the purpose tag.
pub fn derive_seed(root: u64, purpose: Purpose) -> u64 {
    let mut z = root ^ (purpose as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `purpose` at position `stream` (an epoch or iteration).
pub fn stream_rng(root: u64, purpose: Purpose, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(root, purpose));
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn purposes_and_streams_differ() {
        let seeds: Vec<u64> = [Purpose::Market, Purpose::Init, Purpose::Shuffle, Purpose::PseudoPath, Purpose::PseudoNoise, Purpose::CurvatureInit]
            .iter()
            .map(|&p| derive_seed(7, p))
            .collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        let a: u64 = stream_rng(7, Purpose::Shuffle, 0).random();
        let b: u64 = stream_rng(7, Purpose::Shuffle, 1).random();
        let c: u64 = stream_rng(7, Purpose::Shuffle, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
