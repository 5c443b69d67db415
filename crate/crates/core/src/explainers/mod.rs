//! Heatmap producers: gradient-weighted class activation, attention readouts,
//! randomized input sampling and a random-ranking baseline.

mod gradcam;
mod random;
mod rise;
mod rollout;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use gradcam::{grad_cam, grad_cam_from_maps};
pub use random::random_baseline;
pub use rise::{rise, rise_mask, rise_raw, rise_with_masks, RiseConfig};
pub use rollout::{
    attention_rollout, cls_attention_last_layer, cls_patch_row, head_average, last_layer_map, rollout_map,
    rollout_products,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw ranges below this are treated as constant.
pub const DEGENERATE_RANGE: f64 = 1e-12;

pub mod ids {
    pub const GRADCAM: &str = "gradcam";
    pub const ROLLOUT: &str = "rollout";
    pub const CLS_ATTENTION: &str = "cls_attention";
    pub const RISE: &str = "rise";
    pub const RANDOM: &str = "random";
}

/// Input-resolution importance map, min-max normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    #[serde(skip, default = "empty_values")]
    pub values: Tensor,
    pub degenerate: bool,
    pub explainer: String,
    pub target_class: usize,
    pub sample_id: Option<u64>,
    pub raw_min: f64,
    pub raw_max: f64,
    pub seed: Option<u64>,
}

fn empty_values() -> Tensor {
    Tensor::zeros([0, 0])
}

impl Heatmap {
    /// Normalises a raw `[H, W]` map. A constant map becomes all zeros and
    /// is flagged degenerate.
    pub fn from_raw(raw: &Tensor, explainer: &str, target_class: usize) -> Result<Self> {
        if raw.rank() != 2 {
            return Err(Error::dim(format!("heatmap must be [H, W], got {:?}", raw.shape())));
        }
        let (lo, hi) = raw
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let degenerate = !(hi - lo >= DEGENERATE_RANGE);
        let values = if degenerate {
            Tensor::zeros(raw.shape().to_vec())
        } else {
            raw.map(|v| (v - lo) / (hi - lo))
        };
        Ok(Self {
            values,
            degenerate,
            explainer: explainer.to_string(),
            target_class,
            sample_id: None,
            raw_min: lo,
            raw_max: hi,
            seed: None,
        })
    }

    pub fn with_sample(mut self, id: u64) -> Self {
        self.sample_id = Some(id);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Applies `f` to every value, keeping all metadata.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.map(f),
            ..self.clone()
        }
    }

    /// Flat little-endian f64 grid plus a JSON sidecar at `<path>.json`.
    pub fn write_bin(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(self.values.numel() * 8);
        for v in self.values.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        let mut side = serde_json::to_value(self)?;
        side["height"] = self.height().into();
        side["width"] = self.width().into();
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn read_bin(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let dim = |k: &str| {
            side[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("sidecar lacks `{k}`")))
        };
        let (h, w) = (dim("height")?, dim("width")?);
        let bytes = fs::read(path)?;
        if bytes.len() != h * w * 8 {
            return Err(Error::Format(format!(
                "heatmap file holds {} bytes, expected {}",
                bytes.len(),
                h * w * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut map: Heatmap = serde_json::from_value(side)?;
        map.values = Tensor::new([h, w], data)?;
        Ok(map)
    }

    /// 8-bit binary PGM for quick viewing.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width(), self.height())?;
        let pixels: Vec<u8> = self
            .values
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&pixels)?;
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Bilinear resize of a `[h, w]` grid using half-pixel centres (no corner
/// alignment), clamping at the borders.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ly) in &ys {
        for &(x0, x1, lx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
            let bottom = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
            out.push(top * (1.0 - ly) + bottom * ly);
        }
    }
    out
}

/// Nearest-neighbour resize; integer factors replicate each cell.
pub fn upsample_nearest(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let si = (i * h / out_h).min(h - 1);
        for j in 0..out_w {
            let sj = (j * w / out_w).min(w - 1);
            out.push(src[si * w + sj]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_and_degeneracy() {
        let raw = Tensor::new([2, 2], vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        let h = Heatmap::from_raw(&raw, "x", 0).unwrap();
        assert!(!h.degenerate);
        assert_eq!(h.values.data(), &[0.0, 0.5, 0.25, 1.0]);
        let flat = Heatmap::from_raw(&Tensor::full([2, 2], 0.8), "x", 0).unwrap();
        assert!(flat.degenerate);
        assert!(flat.values.data().iter().all(|&v| v == 0.0));
        assert_eq!((flat.raw_min, flat.raw_max), (0.8, 0.8));
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        // 2 -> 4 along one axis: sources at -0.25, 0.25, 0.75, 1.25.
        let out = upsample_bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
        let same = upsample_bilinear(&[1.0, 2.0, 3.0, 4.0], 2, 2, 2, 2);
        assert_eq!(same, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn nearest_replicates_cells() {
        let out = upsample_nearest(&[1.0, 2.0, 3.0, 4.0], 2, 2, 4, 4);
        assert_eq!(&out[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&out[12..], &[3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn bin_round_trip_and_pgm() {
        let raw = Tensor::from_fn([3, 4], |i| i as f64);
        let h = Heatmap::from_raw(&raw, ids::RISE, 2).unwrap().with_sample(9).with_seed(4);
        let dir = std::env::temp_dir().join(format!("faudit-hm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        h.write_bin(dir.join("m.bin")).unwrap();
        assert_eq!(Heatmap::read_bin(dir.join("m.bin")).unwrap(), h);
        h.write_pgm(dir.join("m.pgm")).unwrap();
        let pgm = fs::read(dir.join("m.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(pgm.len(), 11 + 12);
        fs::remove_dir_all(&dir).ok();
    }
}
