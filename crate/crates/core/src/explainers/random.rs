use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ids, Heatmap};
use crate::error::Result;
use crate::tensor::Tensor;

/// Uniformly random pixel ranking: a shuffled `0..H·W` scaled to `[0, 1]`.
pub fn random_baseline(h: usize, w: usize, target_class: usize, seed: u64) -> Result<Heatmap> {
    let n = h * w;
    let mut ranks: Vec<f64> = (0..n).map(|i| i as f64).collect();
    ranks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let raw = Tensor::new([h, w], ranks)?;
    Ok(Heatmap::from_raw(&raw, ids::RANDOM, target_class)?.with_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_and_reproducible() {
        let a = random_baseline(8, 8, 0, 5).unwrap();
        let mut v = a.values.data().to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        assert_eq!(v.len(), 64);
        assert_eq!(a, random_baseline(8, 8, 0, 5).unwrap());
        assert_ne!(a, random_baseline(8, 8, 0, 6).unwrap());
    }

    #[test]
    fn rank_of_a_fixed_pixel_is_uniform() {
        // Chi-square on the rank bucket of pixel 0 over 1000 draws.
        let buckets = 8;
        let mut counts = vec![0usize; buckets];
        for seed in 0..1000 {
            let v = random_baseline(4, 4, 0, seed).unwrap().values.data()[0];
            counts[((v * 15.0).round() as usize) / 2] += 1;
        }
        let expected = 1000.0 / buckets as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 7 degrees of freedom, 99.9th percentile is about 24.3.
        assert!(chi2 < 24.3, "chi2 = {chi2}, counts {counts:?}");
    }
}
