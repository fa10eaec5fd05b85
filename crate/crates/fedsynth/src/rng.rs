//! Deterministic seed derivation. All simulation randomness flows from the
//! single global seed through this mix, so (seed, round, client) streams are
//! replayable and independent of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hash a label path like (seed, round, client_id) into a stream seed.
pub fn derive(parts: &[u64]) -> u64 {
    let mut acc = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        acc = mix(acc ^ p.wrapping_mul(0xff51afd7ed558ccd));
        acc = acc.rotate_left(23).wrapping_add(p);
    }
    mix(acc)
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// n standard-normal draws.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    use rand_distr_polyfill::normal;
    (0..n).map(|_| normal(rng.gen::<f64>(), rng.gen::<f64>())).collect()
}

mod rand_distr_polyfill {
    /// Box-Muller from two uniforms in (0, 1].
    pub fn normal(u1: f64, u2: f64) -> f64 {
        let u1 = (1.0 - u1).max(f64::MIN_POSITIVE);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_deterministic_and_sensitive() {
        assert_eq!(derive(&[1, 2, 3]), derive(&[1, 2, 3]));
        assert_ne!(derive(&[1, 2, 3]), derive(&[1, 3, 2]));
        assert_ne!(derive(&[0]), derive(&[0, 0]));
    }

    #[test]
    fn normal_draws_look_standard() {
        let mut rng = rng_from(&[42]);
        let xs = normal_vec(&mut rng, 20_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "mean {}", mean);
        assert!((var - 1.0).abs() < 0.05, "var {}", var);
    }
}
