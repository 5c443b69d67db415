use crate::error::Result;
use crate::tensor::Tensor;

/// Forward-only access to a classifier: image in, class probabilities out.
///
/// Implementations must be callable from several threads at once.
pub trait Predictor: Sync {
    fn predict(&self, image: &Tensor) -> Result<Vec<f64>>;

    /// Several images at once, one result per image in input order. Remote
    /// predictors override this to pipeline requests.
    fn predict_batch(&self, images: &[Tensor]) -> Vec<Result<Vec<f64>>> {
        images.iter().map(|x| self.predict(x)).collect()
    }
}

impl<F> Predictor for F
where
    F: Fn(&Tensor) -> Result<Vec<f64>> + Sync,
{
    fn predict(&self, image: &Tensor) -> Result<Vec<f64>> {
        self(image)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
