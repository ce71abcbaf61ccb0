//! Counter-based random streams.
//!
//! A master seed and an experiment label are mixed (FNV-1a over the label,
//! then SplitMix64) into a 256-bit ChaCha8 key; the ChaCha stream id is the
//! work-item index (path, ensemble member, ...). Any work item can therefore be
//! regenerated in isolation, and results never depend on how work is spread
//! over threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// A master seed plus experiment label from which substreams are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    key: [u8; 32],
}

impl SeedStream {
    pub fn new(master: u64, experiment: &str) -> Self {
        let mut state = master ^ fnv1a(experiment.as_bytes());
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self { key }
    }

    /// Independent stream number `index`.
    pub fn substream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        rng
    }

    /// Short identifier of substream `index`, used to tag results that must
    /// come from the same realization.
    pub fn fingerprint(&self, index: u64) -> u64 {
        let mut state = u64::from_le_bytes(self.key[..8].try_into().unwrap()) ^ index.rotate_left(29);
        splitmix64(&mut state)
    }

    /// Derives a child label space, e.g. one per sub-experiment.
    pub fn child(&self, label: &str) -> Self {
        let mut state = u64::from_le_bytes(self.key[..8].try_into().unwrap())
            ^ u64::from_le_bytes(self.key[8..16].try_into().unwrap()).rotate_left(17)
            ^ fnv1a(label.as_bytes());
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self { key }
    }
}

/// Shorthand for `SeedStream::new(master, experiment).substream(index)`.
pub fn substream(master: u64, experiment: &str, index: u64) -> ChaCha8Rng {
    SeedStream::new(master, experiment).substream(index)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
