//! Named random streams derived from a single root seed. Each stream is an
//! independent ChaCha stream, so adding chains never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Measurement noise.
    Synthesis,
    /// Ground-truth draws from the prior.
    GroundTruth,
    /// Chain `i`: initial noise, momenta and accept/reject draws.
    Chain(u32),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Synthesis => 1,
            Stream::GroundTruth => 2,
            Stream::Chain(i) => (1 << 32) | u64::from(i),
        }
    }
}

pub fn stream_rng(root_seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(stream.id());
    rng
}

/// Integer seed for APIs that take one, drawn from the named stream.
pub fn stream_seed(root_seed: u64, stream: Stream) -> u64 {
    use rand::Rng;
    stream_rng(root_seed, stream).random()
}
