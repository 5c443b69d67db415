use serde::{Deserialize, Serialize};

use super::{linear, Bound, Init, ParamStore, Recorder};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub n_classes: usize,
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            image_size: 32,
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 2,
            mlp_hidden: 128,
        }
    }
}

impl VitConfig {
    pub fn with_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Patch tokens, excluding the class token.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Class-token vision transformer without normalisation layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyVit {
    config: VitConfig,
    pub(crate) params: ParamStore,
}

impl TinyVit {
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.patch == 0 || !c.image_size.is_multiple_of(c.patch) || c.image_size == 0 {
            return Err(Error::invalid(format!(
                "image size {} not divisible by patch {}",
                c.image_size, c.patch
            )));
        }
        if c.heads == 0 || !c.dim.is_multiple_of(c.heads) || c.depth == 0 || c.n_classes < 2 {
            return Err(Error::invalid(format!("invalid transformer shape {c:?}")));
        }
        let mut init = Init::new(seed);
        let mut p = ParamStore::new();
        let (d, tokens) = (c.dim, c.n_patches() + 1);
        let fan = |n: usize| (1.0 / n as f64).sqrt();
        let branch = fan(d) / (2.0 * c.depth as f64).sqrt();
        p.add("patch.w", init.normal(&[d, 1, c.patch, c.patch], fan(c.patch * c.patch)));
        p.add("patch.b", init.normal(&[d], 0.0));
        p.add("cls", init.normal(&[1, d], 0.02));
        p.add("pos", init.normal(&[tokens, d], 0.02));
        for i in 0..c.depth {
            p.add(format!("block{i}.qkv.w"), init.normal(&[d, 3 * d], fan(d)));
            p.add(format!("block{i}.qkv.b"), init.normal(&[1, 3 * d], 0.0));
            p.add(format!("block{i}.proj.w"), init.normal(&[d, d], branch));
            p.add(format!("block{i}.proj.b"), init.normal(&[1, d], 0.0));
            p.add(format!("block{i}.mlp1.w"), init.normal(&[d, c.mlp_hidden], fan(d)));
            p.add(format!("block{i}.mlp1.b"), init.normal(&[1, c.mlp_hidden], 0.0));
            p.add(
                format!("block{i}.mlp2.w"),
                init.normal(&[c.mlp_hidden, d], fan(c.mlp_hidden) / (2.0 * c.depth as f64).sqrt()),
            );
            p.add(format!("block{i}.mlp2.b"), init.normal(&[1, d], 0.0));
        }
        p.add("head.w", init.normal(&[d, c.n_classes], fan(d)));
        p.add("head.b", init.normal(&[1, c.n_classes], 0.0));
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        for i in 0..self.config.depth {
            names.push(format!("block{i}_attn_in"));
            names.push(format!("block{i}_attn_out"));
            names.push(format!("block{i}_out"));
        }
        names
    }

    fn attention(&self, tape: &mut Tape, x: Var, p: &Bound, i: usize, rec: &mut Recorder) -> Result<Var> {
        let d = self.config.dim;
        let dh = d / self.config.heads;
        let qkv = linear(tape, x, p.get(&format!("block{i}.qkv.w")), p.get(&format!("block{i}.qkv.b")))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut maps = Vec::new();
        for h in 0..self.config.heads {
            let q = tape.narrow(qkv, 1, h * dh, dh)?;
            let k = tape.narrow(qkv, 1, d + h * dh, dh)?;
            let v = tape.narrow(qkv, 1, 2 * d + h * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.mul_scalar(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            if rec.keep_attention {
                maps.push(tape.value(attn).clone());
            }
            heads.push(tape.matmul(attn, v)?);
        }
        if rec.keep_attention {
            rec.attention.push(maps);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        linear(tape, merged, p.get(&format!("block{i}.proj.w")), p.get(&format!("block{i}.proj.b")))
    }

    pub(crate) fn graph(&self, tape: &mut Tape, x: Var, p: &Bound, rec: &mut Recorder) -> Result<Var> {
        let c = &self.config;
        let d = c.dim;
        let n = c.n_patches();
        let e = tape.conv2d(x, p.get("patch.w"), Some(p.get("patch.b")), c.patch, 0)?;
        let e = tape.reshape(e, &[d, n])?;
        let e = tape.transpose(e)?;
        let tokens = tape.concat(&[p.get("cls"), e], 0)?;
        let mut h = tape.add(tokens, p.get("pos"))?;
        h = rec.point(tape, "embed", h)?;

        for i in 0..c.depth {
            h = rec.point(tape, &format!("block{i}_attn_in"), h)?;
            let a = self.attention(tape, h, p, i, rec)?;
            h = tape.add(h, a)?;
            h = rec.point(tape, &format!("block{i}_attn_out"), h)?;
            let m = linear(tape, h, p.get(&format!("block{i}.mlp1.w")), p.get(&format!("block{i}.mlp1.b")))?;
            let m = tape.relu(m)?;
            let m = linear(tape, m, p.get(&format!("block{i}.mlp2.w")), p.get(&format!("block{i}.mlp2.b")))?;
            h = tape.add(h, m)?;
            h = rec.point(tape, &format!("block{i}_out"), h)?;
        }
        let cls = tape.narrow(h, 0, 0, 1)?;
        let logits = linear(tape, cls, p.get("head.w"), p.get("head.b"))?;
        tape.reshape(logits, &[c.n_classes])
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Arch, GradMode, Model};
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn rejects_indivisible_patch() {
        assert!(TinyVit::new(VitConfig { image_size: 30, ..VitConfig::default() }, 0).is_err());
    }

    #[test]
    fn last_block_patch_tokens_do_not_reach_the_logits() {
        let m = Model::new(&Arch::Vit(VitConfig::with_size(8)), 2).unwrap();
        let img = Tensor::from_fn([1, 8, 8], |i| (i % 3) as f64 * 0.5);
        let r = m
            .forward(&img, &["block3_attn_out", "block3_attn_in"], GradMode::NONE)
            .unwrap()
            .backward_logit(0)
            .unwrap();
        let after = &r.activation_grads["block3_attn_out"];
        assert!(after.data()[64..].iter().all(|&v| v == 0.0));
        let before = &r.activation_grads["block3_attn_in"];
        assert!(before.data()[64..].iter().any(|&v| v != 0.0));
    }
}
