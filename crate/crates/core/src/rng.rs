//! Seeded randomness for a training run.
//!
//! One run seed feeds independent ChaCha8 streams, one per consumer, so the
//! draws of one consumer never shift another's. Within a mini-batch the
//! consumers are used in the order mask → sigma → aux → augmentation; the
//! shuffle order of an epoch is a pure function of `(seed, epoch)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const INIT_STREAM: u64 = 0;
const MASK_STREAM: u64 = 1;
const SIGMA_STREAM: u64 = 2;
const AUX_STREAM: u64 = 3;
const AUGMENT_STREAM: u64 = 4;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// u32 words per serialized stream: 8 seed, 2 stream id, 4 word position.
const WORDS_PER_STREAM: usize = 14;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunRng {
    pub mask: ChaCha8Rng,
    pub sigma: ChaCha8Rng,
    pub aux: ChaCha8Rng,
    pub augment: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generator for weight initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, INIT_STREAM)
}

/// Generator for the shuffle of `epoch`.
pub fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    stream(seed, SHUFFLE_STREAM_BASE + epoch as u64)
}

impl RunRng {
    pub fn new(seed: u64) -> Self {
        RunRng {
            mask: stream(seed, MASK_STREAM),
            sigma: stream(seed, SIGMA_STREAM),
            aux: stream(seed, AUX_STREAM),
            augment: stream(seed, AUGMENT_STREAM),
        }
    }

    fn streams(&self) -> [&ChaCha8Rng; 4] {
        [&self.mask, &self.sigma, &self.aux, &self.augment]
    }

    /// Raw generator words: seed, stream id and word position of each stream.
    pub fn to_words(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(4 * WORDS_PER_STREAM);
        for rng in self.streams() {
            for chunk in rng.get_seed().chunks_exact(4) {
                out.push(u32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            }
            let id = rng.get_stream();
            out.extend([id as u32, (id >> 32) as u32]);
            let pos = rng.get_word_pos();
            out.extend((0..4).map(|k| (pos >> (32 * k)) as u32));
        }
        out
    }

    pub fn from_words(words: &[u32]) -> Result<Self> {
        if words.len() != 4 * WORDS_PER_STREAM {
            return Err(Error::Format(format!(
                "RNG state needs {} words, got {}",
                4 * WORDS_PER_STREAM,
                words.len()
            )));
        }
        let mut streams = words.chunks_exact(WORDS_PER_STREAM).map(|w| {
            let mut seed = [0u8; 32];
            for (dst, word) in seed.chunks_exact_mut(4).zip(&w[..8]) {
                dst.copy_from_slice(&word.to_le_bytes());
            }
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(w[8] as u64 | (w[9] as u64) << 32);
            let pos = (0..4).fold(0u128, |acc, k| acc | (w[10 + k] as u128) << (32 * k));
            rng.set_word_pos(pos);
            rng
        });
        let mut next = || streams.next().expect("four streams");
        Ok(RunRng {
            mask: next(),
            sigma: next(),
            aux: next(),
            augment: next(),
        })
    }
}
