//! Label-preserving augmentations: nearest-neighbour rotation, integer
//! translation and additive Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub max_translation: i32,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            max_translation: 3,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    pub const IDENTITY: AugmentConfig = AugmentConfig {
        max_rotation_deg: 0.0,
        max_translation: 0,
        noise_sigma: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub angle_deg: f64,
    pub dx: i32,
    pub dy: i32,
    pub noise: Option<Tensor>,
}

impl Augmentation {
    pub fn sample(cfg: &AugmentConfig, shape: &[usize], rng: &mut impl Rng) -> Self {
        let angle_deg = if cfg.max_rotation_deg > 0.0 {
            rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        } else {
            0.0
        };
        let t = cfg.max_translation.max(0);
        let dx = rng.random_range(-t..=t);
        let dy = rng.random_range(-t..=t);
        let noise = (cfg.noise_sigma > 0.0).then(|| {
            let d = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
            Tensor::from_fn(shape.to_vec(), |_| d.sample(rng))
        });
        Self {
            angle_deg,
            dx,
            dy,
            noise,
        }
    }

    /// Rotate, then translate, then add noise. Pixels pulled from outside
    /// the frame become zero.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let mut out = Vec::with_capacity(image.numel());
        for ch in 0..c {
            let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
            let rotated = rotate_nearest(plane, h, w, self.angle_deg);
            out.extend(translate(&rotated, h, w, self.dx, self.dy));
        }
        if let Some(n) = &self.noise {
            for (o, v) in out.iter_mut().zip(n.data()) {
                *o += v;
            }
        }
        Tensor::from_parts(image.shape().to_vec(), out)
    }

    /// Undoes the geometric part on an `[h, w]` map.
    pub fn invert_map(&self, map: &Tensor) -> Tensor {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let back = translate(map.data(), h, w, -self.dx, -self.dy);
        Tensor::from_parts(vec![h, w], rotate_nearest(&back, h, w, -self.angle_deg))
    }
}

/// Rotation about the grid centre by `deg` degrees, sampled by inverse
/// mapping with nearest-neighbour rounding.
pub fn rotate_nearest(plane: &[f64], h: usize, w: usize, deg: f64) -> Vec<f64> {
    if deg == 0.0 {
        return plane.to_vec();
    }
    let (s, c) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 - cy, j as f64 - cx);
            let sy = (c * y - s * x + cy).round();
            let sx = (s * y + c * x + cx).round();
            if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                out[i * w + j] = plane[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

pub fn translate(plane: &[f64], h: usize, w: usize, dx: i32, dy: i32) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h as i64 {
        let si = i - dy as i64;
        if si < 0 || si >= h as i64 {
            continue;
        }
        for j in 0..w as i64 {
            let sj = j - dx as i64;
            if sj >= 0 && sj < w as i64 {
                out[(i * w as i64 + j) as usize] = plane[(si * w as i64 + sj) as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_config_is_identity() {
        let img = Tensor::from_fn([1, 6, 6], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Augmentation::sample(&AugmentConfig::IDENTITY, img.shape(), &mut rng);
        assert_eq!(a.apply(&img), img);
    }

    #[test]
    fn quarter_turn_of_a_square() {
        let plane: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let r = rotate_nearest(&plane, 3, 3, 90.0);
        // Output (i,j) samples source (j', i') under the inverse map.
        assert_eq!(r[4], 4.0);
        let back = rotate_nearest(&r, 3, 3, -90.0);
        assert_eq!(back, plane);
    }

    #[test]
    fn translation_shifts_and_zero_fills() {
        let plane = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(translate(&plane, 2, 2, 1, 0), vec![0.0, 1.0, 0.0, 3.0]);
        assert_eq!(translate(&plane, 2, 2, 0, -1), vec![3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = Augmentation::sample(&AugmentConfig::default(), &[1, 4, 4], &mut rng);
            assert!(a.angle_deg.abs() <= 15.0);
            assert!(a.dx.abs() <= 3 && a.dy.abs() <= 3);
        }
    }
}
