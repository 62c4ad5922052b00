use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Three feature levels at strides 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Scalar> {
    pub f3: Tensor<T>,
    pub f4: Tensor<T>,
    pub f5: Tensor<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(f3: Tensor<T>, f4: Tensor<T>, f5: Tensor<T>) -> Result<Self> {
        let p = FeaturePyramid { f3, f4, f5 };
        p.validate()?;
        Ok(p)
    }

    pub fn levels(&self) -> [&Tensor<T>; 3] {
        [&self.f3, &self.f4, &self.f5]
    }

    pub fn into_levels(self) -> [Tensor<T>; 3] {
        [self.f3, self.f4, self.f5]
    }

    pub fn from_levels([f3, f4, f5]: [Tensor<T>; 3]) -> Result<Self> {
        Self::new(f3, f4, f5)
    }

    /// Spatial `(h, w)` per level.
    pub fn sizes(&self) -> [(usize, usize); 3] {
        self.levels().map(|t| (t.dim(2), t.dim(3)))
    }

    fn validate(&self) -> Result<()> {
        for t in self.levels() {
            if t.rank() != 4 {
                return Err(Error::InvalidPyramid(format!(
                    "levels must be [N,C,H,W], got {:?}",
                    t.shape()
                )));
            }
        }
        let n = self.f3.dim(0);
        let sizes = self.sizes();
        for i in 0..2 {
            let ((h, w), (h2, w2)) = (sizes[i], sizes[i + 1]);
            if self.levels()[i + 1].dim(0) != n || h != 2 * h2 || w != 2 * w2 {
                return Err(Error::InvalidPyramid(format!(
                    "level {} ({h}x{w}) must be twice level {} ({h2}x{w2}) with the same batch",
                    i + 3,
                    i + 4
                )));
            }
        }
        Ok(())
    }
}
