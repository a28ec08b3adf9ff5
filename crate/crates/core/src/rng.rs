//! Reproducible random streams.
//!
//! Every stochastic quantity in a run is drawn from a named substream of a
//! ChaCha generator keyed by `(seed, replication, substream)`. Independent
//! substreams let a probe or an extra sampler consume randomness without
//! shifting any other draw in the replication.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Concrete generator handed to every sampler.
pub type RngStream = ChaCha12Rng;

/// Named substreams of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Substream {
    Arrivals,
    Services,
    Patiences,
    Probes,
    Initial,
    Renewals,
    Auxiliary,
}

impl Substream {
    fn index(self) -> u64 {
        match self {
            Substream::Arrivals => 0,
            Substream::Services => 1,
            Substream::Patiences => 2,
            Substream::Probes => 3,
            Substream::Initial => 4,
            Substream::Renewals => 5,
            Substream::Auxiliary => 6,
        }
    }
}

const SUBSTREAM_BITS: u32 = 4;

/// Factory for the substreams belonging to one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFactory {
    seed: u64,
}

impl StreamFactory {
    pub fn new(seed: u64) -> Self {
        StreamFactory { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The generator for `substream` of `replication`.
    ///
    /// Identical arguments always give a generator producing the same
    /// sequence, bit for bit.
    pub fn stream(&self, replication: u64, substream: Substream) -> RngStream {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream((replication << SUBSTREAM_BITS) | substream.index());
        rng
    }
}
