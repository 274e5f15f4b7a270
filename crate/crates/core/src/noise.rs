//! Index-addressed randomness for bootstrap failures.
//!
//! Every table site gets its own ChaCha stream keyed by the node id and
//! site kind; element `e` owns words `4e..4e + 4` of that stream. A draw
//! therefore depends only on `(seed, node, kind, element)` and never on
//! evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{LutKind, NodeId};

const WORDS_PER_ELEMENT: u128 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseChannel {
    pub base_seed: u64,
}

impl NoiseChannel {
    pub fn new(base_seed: u64) -> Self {
        Self { base_seed }
    }

    /// Stream for one site, positioned at element 0.
    pub fn stream(&self, node: NodeId, kind: LutKind) -> ElementStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        let lane = match kind {
            LutKind::Relu => 0,
            LutKind::Requant => 1,
        };
        rng.set_stream(((node as u64) << 1) | lane);
        ElementStream { rng }
    }

    /// Seed for image `index` of a batch run under `base_seed`.
    pub fn image_seed(base_seed: u64, index: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(u64::MAX);
        rng.set_word_pos(index as u128 * 2);
        rng.random()
    }
}

/// Draws for consecutive elements of one site.
#[derive(Clone, Debug)]
pub struct ElementStream {
    rng: ChaCha8Rng,
}

impl ElementStream {
    /// Jumps to the draws of element `e`.
    pub fn seek(&mut self, e: usize) {
        self.rng.set_word_pos(e as u128 * WORDS_PER_ELEMENT);
    }

    /// `(u_fail, u_offset)`, both uniform in `[0, 1)`; advances one element.
    #[inline]
    pub fn next_pair(&mut self) -> (f64, f64) {
        (self.rng.random(), self.rng.random())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seek_matches_sequential() {
        let ch = NoiseChannel::new(42);
        let mut a = ch.stream(3, LutKind::Relu);
        let seq: Vec<_> = (0..10).map(|_| a.next_pair()).collect();
        let mut b = ch.stream(3, LutKind::Relu);
        for e in (0..10).rev() {
            b.seek(e);
            assert_eq!(b.next_pair(), seq[e]);
        }
    }

    #[test]
    fn sites_and_seeds_differ() {
        let ch = NoiseChannel::new(1);
        let a = ch.stream(2, LutKind::Relu).next_pair();
        assert_ne!(a, ch.stream(2, LutKind::Requant).next_pair());
        assert_ne!(a, ch.stream(4, LutKind::Relu).next_pair());
        assert_ne!(a, NoiseChannel::new(2).stream(2, LutKind::Relu).next_pair());
        assert_eq!(a, NoiseChannel::new(1).stream(2, LutKind::Relu).next_pair());
        assert_ne!(NoiseChannel::image_seed(5, 0), NoiseChannel::image_seed(5, 1));
    }
}
