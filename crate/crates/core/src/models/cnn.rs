use serde::{Deserialize, Serialize};

use super::{linear, Bound, Init, ParamStore, Recorder};
use crate::autodiff::{PoolKind, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub n_classes: usize,
    pub image_size: usize,
    pub channels1: usize,
    pub channels2: usize,
    pub residual: bool,
    /// Channel-attention MLP reduction ratio.
    pub cbam_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            image_size: 32,
            channels1: 16,
            channels2: 32,
            residual: true,
            cbam_ratio: 4,
            spatial_kernel: 7,
        }
    }
}

impl CnnConfig {
    pub fn with_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }
}

/// conv → pool → conv → pool → (residual) → CBAM → global average → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyCnnCbam {
    config: CnnConfig,
    pub(crate) params: ParamStore,
}

impl TinyCnnCbam {
    pub fn new(config: CnnConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.n_classes < 2 || c.image_size < 4 || !c.image_size.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "cnn needs >= 2 classes and an image size divisible by 4, got {c:?}"
            )));
        }
        if c.cbam_ratio == 0 || c.channels2 / c.cbam_ratio == 0 || c.spatial_kernel.is_multiple_of(2) {
            return Err(Error::invalid("cbam ratio must divide channels; spatial kernel must be odd"));
        }
        let mut init = Init::new(seed);
        let mut p = ParamStore::new();
        let (c1, c2) = (c.channels1, c.channels2);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        p.add("conv1.w", init.normal(&[c1, 1, 3, 3], he(9)));
        p.add("conv1.b", init.normal(&[c1], 0.0));
        p.add("conv2.w", init.normal(&[c2, c1, 3, 3], he(9 * c1)));
        p.add("conv2.b", init.normal(&[c2], 0.0));
        if c.residual {
            p.add("res_a.w", init.normal(&[c2, c2, 3, 3], he(9 * c2)));
            p.add("res_a.b", init.normal(&[c2], 0.0));
            p.add("res_b.w", init.normal(&[c2, c2, 3, 3], 0.5 * he(9 * c2)));
            p.add("res_b.b", init.normal(&[c2], 0.0));
        }
        let hidden = c2 / c.cbam_ratio;
        p.add("cbam.mlp1.w", init.normal(&[c2, hidden], he(c2)));
        p.add("cbam.mlp1.b", init.normal(&[1, hidden], 0.0));
        p.add("cbam.mlp2.w", init.normal(&[hidden, c2], (1.0 / hidden as f64).sqrt()));
        p.add("cbam.mlp2.b", init.normal(&[1, c2], 0.0));
        let k = c.spatial_kernel;
        p.add("cbam.spatial.w", init.normal(&[1, 2, k, k], (1.0 / (2 * k * k) as f64).sqrt()));
        p.add("cbam.spatial.b", init.normal(&[1], 0.0));
        p.add("head.w", init.normal(&[c2, c.n_classes], (1.0 / c2 as f64).sqrt()));
        p.add("head.b", init.normal(&[1, c.n_classes], 0.0));
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["block1_out", "block2_out"];
        if self.config.residual {
            names.push("res_out");
        }
        names.extend([
            "cbam_channel_gate",
            "cbam_channel_out",
            "cbam_spatial_gate",
            "cbam_out",
            "pooled",
        ]);
        names.into_iter().map(String::from).collect()
    }

    fn conv_block(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.conv2d(x, w, Some(b), 1, 1)?;
        let y = tape.relu(y)?;
        tape.pool2d(y, PoolKind::Max(2))
    }

    fn channel_mlp(tape: &mut Tape, pooled: Var, p: &Bound, c: usize) -> Result<Var> {
        let v = tape.reshape(pooled, &[1, c])?;
        let h = linear(tape, v, p.get("cbam.mlp1.w"), p.get("cbam.mlp1.b"))?;
        let h = tape.relu(h)?;
        linear(tape, h, p.get("cbam.mlp2.w"), p.get("cbam.mlp2.b"))
    }

    pub(crate) fn graph(&self, tape: &mut Tape, x: Var, p: &Bound, rec: &mut Recorder) -> Result<Var> {
        let c2 = self.config.channels2;
        let h = Self::conv_block(tape, x, p.get("conv1.w"), p.get("conv1.b"))?;
        let h = rec.point(tape, "block1_out", h)?;
        let h = Self::conv_block(tape, h, p.get("conv2.w"), p.get("conv2.b"))?;
        let mut f = rec.point(tape, "block2_out", h)?;

        if self.config.residual {
            let a = tape.conv2d(f, p.get("res_a.w"), Some(p.get("res_a.b")), 1, 1)?;
            let a = tape.relu(a)?;
            let r = tape.conv2d(a, p.get("res_b.w"), Some(p.get("res_b.b")), 1, 1)?;
            let y = tape.add(f, r)?;
            f = rec.point(tape, "res_out", y)?;
        }
        let shape = tape.value(f).shape().to_vec();

        let avg = tape.pool2d(f, PoolKind::GlobalAvg)?;
        let max = tape.pool2d(f, PoolKind::GlobalMax)?;
        let a = Self::channel_mlp(tape, avg, p, c2)?;
        let m = Self::channel_mlp(tape, max, p, c2)?;
        let s = tape.add(a, m)?;
        let gate = tape.sigmoid(s)?;
        let gate = rec.point(tape, "cbam_channel_gate", gate)?;
        let gate = tape.reshape(gate, &[c2, 1, 1])?;
        let gate = tape.expand(gate, &shape)?;
        let f1 = tape.mul(f, gate)?;
        let f1 = rec.point(tape, "cbam_channel_out", f1)?;

        let mean = tape.mean_axis(f1, 0)?;
        let max = tape.max_axis(f1, 0)?;
        let both = tape.concat(&[mean, max], 0)?;
        let pad = self.config.spatial_kernel / 2;
        let s = tape.conv2d(both, p.get("cbam.spatial.w"), Some(p.get("cbam.spatial.b")), 1, pad)?;
        let sgate = tape.sigmoid(s)?;
        let sgate = rec.point(tape, "cbam_spatial_gate", sgate)?;
        let sgate = tape.expand(sgate, &shape)?;
        let f2 = tape.mul(f1, sgate)?;
        let f2 = rec.point(tape, "cbam_out", f2)?;

        let pooled = tape.pool2d(f2, PoolKind::GlobalAvg)?;
        let pooled = tape.reshape(pooled, &[1, c2])?;
        let pooled = rec.point(tape, "pooled", pooled)?;
        let logits = linear(tape, pooled, p.get("head.w"), p.get("head.b"))?;
        tape.reshape(logits, &[self.config.n_classes])
    }
}
