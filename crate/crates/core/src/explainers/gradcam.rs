use super::{ids, upsample_bilinear, Heatmap};
use crate::error::{Error, Result};
use crate::models::{GradMode, Model};
use crate::tensor::Tensor;

/// Raw class-activation map from feature maps and their gradients, both
/// `[channels, h, w]`, upsampled bilinearly to `out_h × out_w`.
///
/// Channel weights are the spatial means of the gradients; the weighted sum
/// is clipped at zero before upsampling.
pub fn grad_cam_from_maps(acts: &Tensor, grads: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if acts.rank() != 3 || acts.shape() != grads.shape() {
        return Err(Error::dim(format!(
            "grad-cam needs matching [c, h, w] maps, got {:?} and {:?}",
            acts.shape(),
            grads.shape()
        )));
    }
    let (c, h, w) = (acts.shape()[0], acts.shape()[1], acts.shape()[2]);
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for k in 0..c {
        let g = &grads.data()[k * plane..(k + 1) * plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        let a = &acts.data()[k * plane..(k + 1) * plane];
        for (out, &v) in cam.iter_mut().zip(a) {
            *out += alpha * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Tensor::new([out_h, out_w], upsample_bilinear(&cam, h, w, out_h, out_w))
}

/// Reinterprets a `[tokens, dim]` transformer activation (class token first)
/// as `[dim, grid, grid]` feature maps over the patch grid.
fn token_grid(t: &Tensor, grid: usize) -> Result<Tensor> {
    let (tokens, dim) = (t.shape()[0], t.shape()[1]);
    if tokens != grid * grid + 1 {
        return Err(Error::dim(format!(
            "token activation {:?} does not match a {grid}x{grid} patch grid",
            t.shape()
        )));
    }
    let patches = &t.data()[dim..];
    Tensor::new(
        [dim, grid, grid],
        (0..dim * grid * grid)
            .map(|i| patches[(i % (grid * grid)) * dim + i / (grid * grid)])
            .collect(),
    )
}

/// Grad-CAM for `target_class` at `layer`.
pub fn grad_cam(model: &Model, image: &Tensor, target_class: usize, layer: &str) -> Result<Heatmap> {
    if target_class >= model.n_classes() {
        return Err(Error::invalid(format!(
            "class {target_class} out of range for {} classes",
            model.n_classes()
        )));
    }
    let r = model
        .forward(image, &[layer], GradMode::NONE)?
        .backward_logit(target_class)?;
    let (a, g) = (&r.activations[layer], &r.activation_grads[layer]);
    let (a, g) = match (model, a.rank()) {
        (_, 3) => (a.clone(), g.clone()),
        (Model::Vit(v), 2) => {
            let grid = v.config().grid();
            (token_grid(a, grid)?, token_grid(g, grid)?)
        }
        _ => {
            return Err(Error::dim(format!(
                "layer `{layer}` has non-spatial shape {:?}",
                a.shape()
            )))
        }
    };
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let raw = grad_cam_from_maps(&a, &g, h, w)?;
    Heatmap::from_raw(&raw, ids::GRADCAM, target_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, CnnConfig, VitConfig};

    #[test]
    fn constant_map_with_unit_gradient_is_degenerate() {
        let a = Tensor::ones([1, 4, 4]);
        let raw = grad_cam_from_maps(&a, &Tensor::ones([1, 4, 4]), 8, 8).unwrap();
        assert!(raw.data().iter().all(|&v| v == 1.0));
        assert!(Heatmap::from_raw(&raw, "g", 0).unwrap().degenerate);
    }

    #[test]
    fn negative_gradient_is_clipped_to_zero() {
        let a = Tensor::ones([1, 4, 4]);
        let raw = grad_cam_from_maps(&a, &Tensor::full([1, 4, 4], -1.0), 4, 4).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0.0));
        let h = Heatmap::from_raw(&raw, "g", 0).unwrap();
        assert!(h.degenerate);
    }

    #[test]
    fn hand_built_two_map_case() {
        let a = Tensor::new([2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let g = Tensor::new([2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let raw = grad_cam_from_maps(&a, &g, 2, 2).unwrap();
        assert_eq!(raw.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_rescaling_cancels_activation_rescaling() {
        let a = Tensor::from_fn([3, 2, 2], |i| (i as f64 * 0.7).sin());
        let g = Tensor::from_fn([3, 2, 2], |i| (i as f64 * 1.3).cos());
        let base = grad_cam_from_maps(&a, &g, 4, 4).unwrap();
        let scaled = grad_cam_from_maps(&a.map(|v| v * 4.0), &g.map(|v| v / 4.0), 4, 4).unwrap();
        assert!(base.max_abs_diff(&scaled) < 1e-12);
    }

    #[test]
    fn model_paths() {
        let img = Tensor::from_fn([1, 8, 8], |i| ((i * 7) % 5) as f64 / 4.0);
        let cnn = Model::new(&Arch::Cnn(CnnConfig::with_size(8)), 3).unwrap();
        let h = grad_cam(&cnn, &img, 1, "cbam_out").unwrap();
        assert_eq!(h.values.shape(), [8, 8]);
        assert!(grad_cam(&cnn, &img, 1, "pooled").is_err());
        assert!(grad_cam(&cnn, &img, 9, "cbam_out").is_err());
        let vit = Model::new(&Arch::Vit(VitConfig::with_size(8)), 3).unwrap();
        let h = grad_cam(&vit, &img, 0, &vit.gradcam_layer()).unwrap();
        assert!(!h.degenerate);
    }

    #[test]
    fn token_grid_layout() {
        // two patches on a 1x2 grid is not square; use 1x1 grid with dim 3.
        let t = Tensor::new([2, 3], vec![9.0, 9.0, 9.0, 1.0, 2.0, 3.0]).unwrap();
        let g = token_grid(&t, 1).unwrap();
        assert_eq!(g.shape(), [3, 1, 1]);
        assert_eq!(g.data(), &[1.0, 2.0, 3.0]);
        let t = Tensor::from_fn([5, 2], |i| i as f64);
        let g = token_grid(&t, 2).unwrap();
        // channel 0 over patches: rows 1..5 col 0 -> 2,4,6,8
        assert_eq!(&g.data()[..4], &[2.0, 4.0, 6.0, 8.0]);
    }
}
