//! Keyed random streams.
//!
//! Every random quantity in the crate is drawn from a stream addressed by a
//! key path such as `(seed, BOOTSTRAP, draw, ROWS)`. The key path is folded
//! through SplitMix64 into a 64-bit seed for a ChaCha8 generator, so a
//! stream's contents depend only on its key and never on which thread asks
//! for it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags. Distinct constants keep unrelated consumers of one seed apart.
pub mod tag {
    pub const FOLD_ROWS: u64 = 0x10;
    pub const FOLD_COLS: u64 = 0x11;
    pub const BOOTSTRAP: u64 = 0x20;
    pub const MULTIPLIER_GROUP: u64 = 0x21;
    pub const DGP: u64 = 0x30;
    pub const COMPONENT_CELL: u64 = 0x31;
    pub const COMPONENT_ROW: u64 = 0x32;
    pub const COMPONENT_COL: u64 = 0x33;
    pub const DGP_COVARIATES: u64 = 0x34;
    pub const DGP_NOISE: u64 = 0x35;
    pub const DGP_SELECTION: u64 = 0x36;
    pub const DGP_TREATMENT: u64 = 0x37;
    pub const REPLICATION: u64 = 0x40;
    pub const REPLICATION_FOLDS: u64 = 0x41;
    pub const REPLICATION_BANDS: u64 = 0x42;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key path into a single 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k.wrapping_add(0x632b_e59b_d9b4_e019))))
}

/// A generator for the stream at `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Fills `out` with independent standard normals from the given stream.
pub fn fill_standard_normal(seed: u64, path: &[u64], out: &mut [f64]) {
    let mut rng = stream(seed, path);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_stream() {
        let a: Vec<u64> = (0..8).map({
            let mut r = stream(7, &[1, 2, 3]);
            move |_| r.random()
        }).collect();
        let b: Vec<u64> = (0..8).map({
            let mut r = stream(7, &[1, 2, 3]);
            move |_| r.random()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn key_order_matters() {
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        assert_ne!(derive_seed(7, &[]), derive_seed(7, &[0]));
    }

    #[test]
    fn normals_have_unit_scale() {
        let mut buf = vec![0.0; 200_000];
        fill_standard_normal(3, &[tag::BOOTSTRAP], &mut buf);
        let n = buf.len() as f64;
        let mean = buf.iter().sum::<f64>() / n;
        let var = buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }
}
