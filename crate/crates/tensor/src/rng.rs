//! Seeded, forkable random streams.
//!
//! Every consumer of randomness takes a stream forked from the run seed and
//! a stream id, so results never depend on how work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Result, TensorError};

pub type StreamRng = ChaCha8Rng;

/// Independent stream `stream_id` of the generator seeded by `seed`.
pub fn rng_fork(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Stable stream id for a labelled, indexed consumer.
pub fn stream_id(label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer with the index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws an index distributed according to `probs`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    if probs.is_empty() {
        return Err(TensorError::InvalidDistribution("empty".into()));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(TensorError::InvalidDistribution(format!(
            "entry {p} is not a probability"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(TensorError::InvalidDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_nonzero = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_nonzero)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_distribution_always_first() {
        let mut rng = rng_fork(7, 0);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn fair_coin_frequency() {
        // 99% binomial interval for n = 10000, p = 0.5 is about ±0.013.
        let mut rng = rng_fork(11, 3);
        let n = 10_000;
        let first = (0..n)
            .filter(|_| sample_categorical(&[0.5, 0.5], &mut rng).unwrap() == 0)
            .count();
        let freq = first as f64 / n as f64;
        assert!((0.48..=0.52).contains(&freq), "freq = {freq}");
    }

    #[test]
    fn forked_streams() {
        let draw = |s| -> Vec<u64> {
            let mut r = rng_fork(42, s);
            (0..16).map(|_| r.random()).collect()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn rejects_bad_distributions() {
        let mut rng = rng_fork(0, 0);
        assert!(sample_categorical(&[0.5, 0.4], &mut rng).is_err());
        assert!(sample_categorical(&[1.5, -0.5], &mut rng).is_err());
        assert!(sample_categorical(&[], &mut rng).is_err());
    }

    #[test]
    fn stream_ids_differ_by_label_and_index() {
        assert_ne!(stream_id("bt", 1), stream_id("rec", 1));
        assert_ne!(stream_id("bt", 1), stream_id("bt", 2));
        assert_eq!(stream_id("bt", 9), stream_id("bt", 9));
    }
}
