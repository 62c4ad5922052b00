use super::activation::sigmoid_scalar;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Tensor<T> {
    /// Elementwise binary cross-entropy of logits against constant targets, in the stable
    /// form `max(x, 0) - x*y + ln(1 + e^-|x|)`. No reduction.
    pub fn bce_with_logits(&self, targets: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", self.shape(), targets.shape()),
            ));
        }
        let out = self
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        let (x, y) = (self.clone(), targets.detach());
        Ok(Tensor::from_op(
            "bce_with_logits",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |_, g| {
                let gx = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g)
                    .map(|((&x, &y), &g)| g * (sigmoid_scalar(x) - y))
                    .collect();
                vec![Some(gx)]
            },
        ))
    }
}
