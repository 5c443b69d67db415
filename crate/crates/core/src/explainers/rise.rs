use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ids, upsample_bilinear, Heatmap};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::predictor::Predictor;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiseConfig {
    pub n_masks: usize,
    /// Side of the coarse Bernoulli grid.
    pub grid: usize,
    pub keep_prob: f64,
    pub seed: u64,
    /// Random sub-cell offset of each upsampled mask.
    pub random_shift: bool,
    /// Masks evaluated per prediction batch.
    pub batch: usize,
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self {
            n_masks: 4000,
            grid: 8,
            keep_prob: 0.5,
            seed: 0,
            random_shift: true,
            batch: 50,
        }
    }
}

impl RiseConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.n_masks == 0 {
            return Err(Error::invalid("RISE needs at least one mask"));
        }
        if self.grid == 0 || self.grid > h.min(w) {
            return Err(Error::invalid(format!(
                "RISE grid {} must lie in [1, {}]",
                self.grid,
                h.min(w)
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(Error::invalid(format!("keep probability {} outside (0, 1)", self.keep_prob)));
        }
        Ok(())
    }
}

/// Mask `index` for an `h × w` input, `[h, w]` with values in `[0, 1]`.
///
/// Each mask draws from its own ChaCha stream, so masks are reproducible
/// independently of evaluation order.
pub fn rise_mask(cfg: &RiseConfig, index: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let s = cfg.grid;
    let coarse: Vec<f64> = (0..s * s)
        .map(|_| if rng.random::<f64>() < cfg.keep_prob { 1.0 } else { 0.0 })
        .collect();
    if !cfg.random_shift {
        return Tensor::from_parts(vec![h, w], upsample_bilinear(&coarse, s, s, h, w));
    }
    let (ch, cw) = (h.div_ceil(s), w.div_ceil(s));
    let (big_h, big_w) = ((s + 1) * ch, (s + 1) * cw);
    let big = upsample_bilinear(&coarse, s, s, big_h, big_w);
    let dy = rng.random_range(0..ch);
    let dx = rng.random_range(0..cw);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        out.extend_from_slice(&big[(i + dy) * big_w + dx..][..w]);
    }
    Tensor::from_parts(vec![h, w], out)
}

fn masked(image: &Tensor, mask: &Tensor) -> Tensor {
    let plane = mask.numel();
    Tensor::from_parts(
        image.shape().to_vec(),
        image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mask.data()[i % plane])
            .collect(),
    )
}

fn class_prob(probs: Vec<f64>, target: usize) -> Result<f64> {
    probs.get(target).copied().ok_or_else(|| {
        Error::invalid(format!("class {target} out of range for {} probabilities", probs.len()))
    })
}

fn image_plane(image: &Tensor) -> Result<(usize, usize)> {
    if image.rank() != 3 {
        return Err(Error::dim(format!("expected a [c, h, w] image, got {:?}", image.shape())));
    }
    Ok((image.shape()[1], image.shape()[2]))
}

/// Weighted mask average for explicit masks, divided by the mask count.
pub fn rise_with_masks(predictor: &dyn Predictor, image: &Tensor, target: usize, masks: &[Tensor]) -> Result<Tensor> {
    let (h, w) = image_plane(image)?;
    if masks.is_empty() {
        return Err(Error::invalid("RISE needs at least one mask"));
    }
    let inputs: Vec<Tensor> = masks
        .iter()
        .map(|m| {
            if m.shape() != [h, w] {
                Err(Error::dim(format!("mask {:?} does not match {h}x{w}", m.shape())))
            } else {
                Ok(masked(image, m))
            }
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; h * w];
    for (i, (r, m)) in predictor.predict_batch(&inputs).into_iter().zip(masks).enumerate() {
        let p = r.and_then(|p| class_prob(p, target)).map_err(|e| Error::MaskPredict {
            index: i,
            source: Box::new(e),
        })?;
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += p * v;
        }
    }
    let n = masks.len() as f64;
    Ok(Tensor::from_parts(vec![h, w], acc.into_iter().map(|v| v / n).collect()))
}

/// Unnormalised RISE map `(1/N) Σ f_c(x ⊙ M_i) M_i`.
///
/// Masks are processed in fixed batches that may run concurrently; batch
/// sums are combined in mask order, so the result does not depend on `exec`.
pub fn rise_raw(
    predictor: &dyn Predictor,
    image: &Tensor,
    target: usize,
    cfg: &RiseConfig,
    exec: Exec,
) -> Result<Tensor> {
    let (h, w) = image_plane(image)?;
    cfg.validate(h, w)?;
    let batch = cfg.batch.max(1);
    let n_batches = cfg.n_masks.div_ceil(batch);
    let partials = exec.map(n_batches, |b| -> Result<Vec<f64>> {
        let range = b * batch..((b + 1) * batch).min(cfg.n_masks);
        let masks: Vec<Tensor> = range.clone().map(|i| rise_mask(cfg, i, h, w)).collect();
        let inputs: Vec<Tensor> = masks.iter().map(|m| masked(image, m)).collect();
        let mut acc = vec![0.0; h * w];
        for ((r, m), i) in predictor.predict_batch(&inputs).into_iter().zip(&masks).zip(range) {
            let p = r.and_then(|p| class_prob(p, target)).map_err(|e| Error::MaskPredict {
                index: i,
                source: Box::new(e),
            })?;
            for (a, v) in acc.iter_mut().zip(m.data()) {
                *a += p * v;
            }
        }
        Ok(acc)
    });
    let mut total = vec![0.0; h * w];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part?) {
            *t += v;
        }
    }
    let n = cfg.n_masks as f64;
    Ok(Tensor::from_parts(vec![h, w], total.into_iter().map(|v| v / n).collect()))
}

pub fn rise(predictor: &dyn Predictor, image: &Tensor, target: usize, cfg: &RiseConfig, exec: Exec) -> Result<Heatmap> {
    let raw = rise_raw(predictor, image, target, cfg, exec)?;
    Ok(Heatmap::from_raw(&raw, ids::RISE, target)?.with_seed(cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(p: f64) -> impl Fn(&Tensor) -> Result<Vec<f64>> + Sync {
        move |_: &Tensor| Ok(vec![p, 1.0 - p])
    }

    #[test]
    fn single_full_mask_constant_model() {
        let img = Tensor::ones([1, 4, 4]);
        let raw = rise_with_masks(&constant(0.8), &img, 0, &[Tensor::ones([4, 4])]).unwrap();
        assert!(raw.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        assert!(Heatmap::from_raw(&raw, "r", 0).unwrap().degenerate);
    }

    #[test]
    fn disjoint_halves() {
        let left = Tensor::from_fn([4, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 });
        let right = left.map(|v| 1.0 - v);
        // Scores 1 when the left half is kept.
        let f = |x: &Tensor| -> Result<Vec<f64>> {
            let p = if x.data()[0] > 0.0 { 1.0 } else { 0.0 };
            Ok(vec![p, 1.0 - p])
        };
        let img = Tensor::ones([1, 4, 4]);
        let raw = rise_with_masks(&f, &img, 0, &[left.clone(), right]).unwrap();
        for (r, l) in raw.data().iter().zip(left.data()) {
            assert_eq!(*r, if *l == 1.0 { 0.5 } else { 0.0 });
        }
        let h = Heatmap::from_raw(&raw, "r", 0).unwrap();
        assert_eq!(h.values.data(), left.data());
    }

    #[test]
    fn masks_are_reproducible_and_in_range() {
        let cfg = RiseConfig { seed: 3, ..RiseConfig::default() };
        let a = rise_mask(&cfg, 17, 32, 32);
        assert_eq!(a, rise_mask(&cfg, 17, 32, 32));
        assert_ne!(a, rise_mask(&cfg, 18, 32, 32));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let flat = RiseConfig { random_shift: false, ..cfg };
        assert_eq!(rise_mask(&flat, 0, 16, 16).shape(), [16, 16]);
    }

    #[test]
    fn execution_mode_does_not_change_the_map() {
        let w = Tensor::from_fn([1, 8, 8], |i| (i as f64 * 0.3).sin());
        let f = move |x: &Tensor| -> Result<Vec<f64>> {
            let s: f64 = x.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-s).exp());
            Ok(vec![p, 1.0 - p])
        };
        let cfg = RiseConfig { n_masks: 130, grid: 4, batch: 16, ..RiseConfig::default() };
        let img = Tensor::ones([1, 8, 8]);
        let a = rise_raw(&f, &img, 0, &cfg, Exec::Sequential).unwrap();
        let b = rise_raw(&f, &img, 0, &cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prediction_failure_names_the_mask() {
        let f = |x: &Tensor| -> Result<Vec<f64>> {
            if x.data()[0] == 0.0 {
                Err(Error::Protocol("boom".into()))
            } else {
                Ok(vec![1.0, 0.0])
            }
        };
        let masks = [Tensor::ones([2, 2]), Tensor::zeros([2, 2])];
        match rise_with_masks(&f, &Tensor::ones([1, 2, 2]), 0, &masks) {
            Err(Error::MaskPredict { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_config() {
        let img = Tensor::ones([1, 4, 4]);
        for cfg in [
            RiseConfig { n_masks: 0, ..RiseConfig::default() },
            RiseConfig { grid: 5, ..RiseConfig::default() },
            RiseConfig { keep_prob: 1.0, grid: 2, ..RiseConfig::default() },
        ] {
            assert!(rise_raw(&constant(0.5), &img, 0, &cfg, Exec::Sequential).is_err());
        }
    }
}
