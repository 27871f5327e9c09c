//! Counter-based random streams.
//!
//! Every draw in the laboratory comes from an [`RngStream`] whose output is a
//! pure function of `(master_seed, env_id, stream, counter)`. Streams with
//! different `(env_id, stream)` keys never share draws, so parallel
//! collection order cannot perturb results, and toggling one consumer (for
//! example the dropout mask) leaves every other stream untouched.
//!
//! Backed by ChaCha8: the master seed keys the cipher, `(env_id, stream)`
//! selects the 64-bit nonce and `counter` is the 64-bit word position.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Consumers of randomness. Each owns a disjoint ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamId {
    ActionNoise,
    Dropout,
    EnvReset,
    Terrain,
    ObsNoise,
    /// Minibatch permutation during updates.
    Shuffle,
    /// Parameter initialisation.
    Init,
    /// Mask draws for conventional dropout during the update phase.
    TrainDropout,
}

impl StreamId {
    fn tag(self) -> u64 {
        match self {
            StreamId::ActionNoise => 1,
            StreamId::Dropout => 2,
            StreamId::EnvReset => 3,
            StreamId::Terrain => 4,
            StreamId::ObsNoise => 5,
            StreamId::Shuffle => 6,
            StreamId::Init => 7,
            StreamId::TrainDropout => 8,
        }
    }
}

/// A seekable random stream. `counter` counts consumed 64-bit words.
#[derive(Clone)]
pub struct RngStream {
    master_seed: u64,
    env_id: u32,
    stream: StreamId,
    counter: u64,
    core: ChaCha8Rng,
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RngStream")
            .field("master_seed", &self.master_seed)
            .field("env_id", &self.env_id)
            .field("stream", &self.stream)
            .field("counter", &self.counter)
            .finish()
    }
}

impl PartialEq for RngStream {
    fn eq(&self, other: &Self) -> bool {
        self.master_seed == other.master_seed
            && self.env_id == other.env_id
            && self.stream == other.stream
            && self.counter == other.counter
    }
}

impl RngStream {
    pub fn new(master_seed: u64, env_id: u32, stream: StreamId) -> Self {
        Self::at(master_seed, env_id, stream, 0)
    }

    /// Reconstruct a stream positioned at `counter`.
    pub fn at(master_seed: u64, env_id: u32, stream: StreamId, counter: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(master_seed);
        core.set_stream(((env_id as u64) << 8) | stream.tag());
        core.set_word_pos(counter as u128 * 2);
        Self {
            master_seed,
            env_id,
            stream,
            counter,
            core,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn env_id(&self) -> u32 {
        self.env_id
    }

    pub fn stream(&self) -> StreamId {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.core.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution. One word per draw.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. Always consumes exactly two words.
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)` by rejection-free multiply-shift. One word.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle. Consumes `len - 1` words.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// The per-environment bundle of streams used during collection.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStreams {
    pub action_noise: RngStream,
    pub dropout: RngStream,
    pub reset: RngStream,
    pub obs_noise: RngStream,
}

impl EnvStreams {
    pub fn new(master_seed: u64, env_id: u32) -> Self {
        Self {
            action_noise: RngStream::new(master_seed, env_id, StreamId::ActionNoise),
            dropout: RngStream::new(master_seed, env_id, StreamId::Dropout),
            reset: RngStream::new(master_seed, env_id, StreamId::EnvReset),
            obs_noise: RngStream::new(master_seed, env_id, StreamId::ObsNoise),
        }
    }
}
