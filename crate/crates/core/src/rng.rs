//! Deterministic per-consumer random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of the run seed. Each gets its own ChaCha stream, so
/// adding draws in one place never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ClassCenters = 1,
    TrainSamples = 2,
    TestSamples = 3,
    TeacherInit = 4,
    TeacherShuffle = 5,
    StudentInit = 6,
    StudentShuffle = 7,
    BiasTrace = 8,
    Check = 9,
}

pub fn stream(seed: u64, consumer: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(consumer as u64);
    rng
}
