use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{AugmentConfig, Augmentation};
use crate::error::{Error, Result};
use crate::explainers::Heatmap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    pub k: usize,
    pub augment: AugmentConfig,
    /// Map the augmented heatmap back through the inverse geometric
    /// transform before comparing.
    pub align: bool,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            k: 5,
            augment: AugmentConfig::default(),
            align: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityResult {
    pub value: f64,
    /// Comparisons where either map had zero norm on the region.
    pub zero_norm_terms: usize,
}

/// Cosine similarity over pixels where `region` is true; `None` when either
/// side has zero norm there.
pub fn masked_cosine(a: &[f64], b: &[f64], region: &[bool]) -> Option<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for ((x, y), &keep) in a.iter().zip(b).zip(region) {
        if keep {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Mean cosine similarity between the heatmap of `image` and heatmaps of
/// `k` augmented copies, over the pixels where the original image is
/// positive. A zero-norm comparison contributes 0.
pub fn stability(
    explain: &dyn Fn(&Tensor) -> Result<Heatmap>,
    image: &Tensor,
    cfg: &StabilityConfig,
    seed: u64,
) -> Result<StabilityResult> {
    if cfg.k == 0 {
        return Err(Error::invalid("stability needs at least one augmentation"));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let region: Vec<bool> = (0..h * w)
        .map(|p| (0..c).any(|ch| image.data()[ch * h * w + p] > 0.0))
        .collect();
    let base = explain(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut zero_norm_terms = 0;
    for _ in 0..cfg.k {
        let aug = Augmentation::sample(&cfg.augment, image.shape(), &mut rng);
        let other = explain(&aug.apply(image))?;
        let other = if cfg.align {
            aug.invert_map(&other.values)
        } else {
            other.values
        };
        match masked_cosine(base.values.data(), other.data(), &region) {
            Some(v) => total += v,
            None => zero_norm_terms += 1,
        }
    }
    Ok(StabilityResult {
        value: total / cfg.k as f64,
        zero_norm_terms,
    })
}
