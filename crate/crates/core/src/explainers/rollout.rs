use super::{ids, upsample_nearest, Heatmap};
use crate::error::{Error, Result};
use crate::models::{GradMode, Model};
use crate::predictor::argmax;
use crate::tensor::{gemm, Tensor};

/// Mean over heads of one layer's `[tokens, tokens]` attention matrices.
pub fn head_average(heads: &[Tensor]) -> Result<Tensor> {
    let first = heads
        .first()
        .ok_or_else(|| Error::invalid("attention layer with no heads"))?;
    let n = first.shape().first().copied().unwrap_or(0);
    if first.shape() != [n, n] || heads.iter().any(|h| h.shape() != first.shape()) {
        return Err(Error::dim("attention heads must be equal square matrices"));
    }
    let mut avg = vec![0.0; n * n];
    for h in heads {
        for (a, v) in avg.iter_mut().zip(h.data()) {
            *a += v;
        }
    }
    let k = heads.len() as f64;
    avg.iter_mut().for_each(|v| *v /= k);
    Tensor::new([n, n], avg)
}

/// Cumulative products `R_l = (½Ā_l + ½I) · R_{l-1}` with `R_0 = I`, one per
/// layer, where `Ā_l` is the head-averaged attention of layer `l`.
pub fn rollout_products(stack: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    if stack.is_empty() {
        return Err(Error::invalid("model exposes no attention stack"));
    }
    let mut out: Vec<Tensor> = Vec::with_capacity(stack.len());
    for layer in stack {
        let avg = head_average(layer)?;
        let n = avg.shape()[0];
        let mixed: Vec<f64> = avg
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| 0.5 * v + if i / n == i % n { 0.5 } else { 0.0 })
            .collect();
        let next = match out.last() {
            None => mixed,
            Some(prev) => {
                if prev.shape() != avg.shape() {
                    return Err(Error::dim("attention layers disagree on token count"));
                }
                gemm(&mixed, prev.data(), n, n, n)
            }
        };
        out.push(Tensor::new([n, n], next)?);
    }
    Ok(out)
}

/// Class-token row restricted to patch tokens.
pub fn cls_patch_row(m: &Tensor) -> Vec<f64> {
    let n = m.shape()[1];
    m.data()[1..n].to_vec()
}

fn patch_grid(row: Vec<f64>) -> Result<(Tensor, usize)> {
    let grid = (row.len() as f64).sqrt().round() as usize;
    if grid * grid != row.len() || grid == 0 {
        return Err(Error::dim(format!("{} patch tokens do not form a square grid", row.len())));
    }
    Ok((Tensor::new([grid, grid], row)?, grid))
}

/// Rollout class-token map over the patch grid, before upsampling.
pub fn rollout_map(stack: &[Vec<Tensor>]) -> Result<Tensor> {
    let products = rollout_products(stack)?;
    let last = products.last().expect("non-empty stack");
    Ok(patch_grid(cls_patch_row(last))?.0)
}

/// Head-averaged class-token attention of the last layer, without residual
/// mixing.
pub fn last_layer_map(stack: &[Vec<Tensor>]) -> Result<Tensor> {
    let last = stack
        .last()
        .ok_or_else(|| Error::invalid("model exposes no attention stack"))?;
    Ok(patch_grid(cls_patch_row(&head_average(last)?))?.0)
}

fn upsampled(grid_map: &Tensor, image: &Tensor, id: &str, target: usize) -> Result<Heatmap> {
    let (g, gw) = (grid_map.shape()[0], grid_map.shape()[1]);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let up = Tensor::new([h, w], upsample_nearest(grid_map.data(), g, gw, h, w))?;
    Heatmap::from_raw(&up, id, target)
}

fn attention_pass(model: &Model, image: &Tensor) -> Result<(Vec<Vec<Tensor>>, usize)> {
    if !matches!(model, Model::Vit(_)) {
        return Err(Error::invalid("attention explainers need a transformer model"));
    }
    let f = model.forward(image, &[], GradMode::NONE)?;
    let target = argmax(f.logits().data());
    Ok((f.attention().to_vec(), target))
}

pub fn attention_rollout(model: &Model, image: &Tensor) -> Result<Heatmap> {
    let (stack, target) = attention_pass(model, image)?;
    upsampled(&rollout_map(&stack)?, image, ids::ROLLOUT, target)
}

pub fn cls_attention_last_layer(model: &Model, image: &Tensor) -> Result<Heatmap> {
    let (stack, target) = attention_pass(model, image)?;
    upsampled(&last_layer_map(&stack)?, image, ids::CLS_ATTENTION, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, CnnConfig, VitConfig};

    fn identity_layer(n: usize) -> Vec<Tensor> {
        vec![Tensor::eye(n)]
    }

    #[test]
    fn identity_attention_is_degenerate() {
        let map = rollout_map(&[identity_layer(5)]).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
        let img = Tensor::zeros([1, 4, 4]);
        assert!(upsampled(&map, &img, "r", 0).unwrap().degenerate);
    }

    #[test]
    fn uniform_attention_is_constant() {
        let n = 5;
        let u = Tensor::full([n, n], 1.0 / n as f64);
        let map = rollout_map(&[vec![u.clone()]]).unwrap();
        for &v in map.data() {
            assert!((v - 0.5 / n as f64).abs() < 1e-15);
        }
        let last = last_layer_map(&[vec![u]]).unwrap();
        assert!(last.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn depth_one_last_layer_is_raw_average() {
        let a = Tensor::new([3, 3], vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4]).unwrap();
        let b = Tensor::new([3, 3], vec![0.6, 0.1, 0.3, 0.5, 0.5, 0.0, 0.2, 0.2, 0.6]).unwrap();
        let avg = head_average(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cls_patch_row(&avg), vec![0.3, 0.3]);
    }

    #[test]
    fn dominant_patch_wins() {
        let n = 5;
        let mut data = vec![0.05; n * n];
        data[3] = 0.8;
        let a = Tensor::new([n, n], data).unwrap();
        let map = last_layer_map(&[vec![a]]).unwrap();
        assert_eq!(argmax(map.data()), 2);
    }

    #[test]
    fn cnn_has_no_attention() {
        let cnn = Model::new(&Arch::Cnn(CnnConfig::with_size(8)), 0).unwrap();
        assert!(attention_rollout(&cnn, &Tensor::zeros([1, 8, 8])).is_err());
    }

    #[test]
    fn vit_rollout_shapes() {
        let vit = Model::new(&Arch::Vit(VitConfig::with_size(8)), 0).unwrap();
        let img = Tensor::from_fn([1, 8, 8], |i| (i % 5) as f64 / 4.0);
        let h = attention_rollout(&vit, &img).unwrap();
        assert_eq!(h.values.shape(), [8, 8]);
        assert_eq!(h.values.at(&[0, 0]), h.values.at(&[3, 3]));
        let c = cls_attention_last_layer(&vit, &img).unwrap();
        assert_eq!(c.explainer, ids::CLS_ATTENTION);
    }
}
