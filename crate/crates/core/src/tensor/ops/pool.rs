use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Axis along which [`Tensor::directional_avg_pool`] keeps resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    /// Averages across the width, keeping one value per row: `[N, C, H, 1]`.
    Horizontal,
    /// Averages across the height, keeping one value per column: `[N, C, 1, W]`.
    Vertical,
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [N,C,H,W], got {:?}", t.shape()),
        )),
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn directional_avg_pool(&self, axis: PoolAxis) -> Result<Tensor<T>> {
        let (n, c, h, w) = dims4("directional_avg_pool", self)?;
        let planes = n * c;
        let x = self.data();
        match axis {
            PoolAxis::Horizontal => {
                let inv = T::lit(1.0 / w as f64);
                let out: Vec<T> = x
                    .chunks(w)
                    .map(|row| row.iter().copied().sum::<T>() * inv)
                    .collect();
                Ok(Tensor::from_op(
                    "directional_avg_pool",
                    vec![n, c, h, 1],
                    out,
                    vec![self.clone()],
                    move |_, g| {
                        let gx = g
                            .iter()
                            .flat_map(|&v| std::iter::repeat_n(v * inv, w))
                            .collect();
                        vec![Some(gx)]
                    },
                ))
            }
            PoolAxis::Vertical => {
                let inv = T::lit(1.0 / h as f64);
                let mut out = vec![T::zero(); planes * w];
                for (p, plane) in x.chunks(h * w).enumerate() {
                    let dst = &mut out[p * w..(p + 1) * w];
                    for row in plane.chunks(w) {
                        dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    dst.iter_mut().for_each(|d| *d *= inv);
                }
                Ok(Tensor::from_op(
                    "directional_avg_pool",
                    vec![n, c, 1, w],
                    out,
                    vec![self.clone()],
                    move |_, g| {
                        let mut gx = Vec::with_capacity(planes * h * w);
                        for p in 0..planes {
                            for _ in 0..h {
                                gx.extend(g[p * w..(p + 1) * w].iter().map(|&v| v * inv));
                            }
                        }
                        vec![Some(gx)]
                    },
                ))
            }
        }
    }

    /// Mean over all spatial positions of each channel: `[N, C, 1, 1]`.
    pub fn global_avg_pool_2d(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = dims4("global_avg_pool_2d", self)?;
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let out = self
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(Tensor::from_op(
            "global_avg_pool_2d",
            vec![n, c, 1, 1],
            out,
            vec![self.clone()],
            move |_, g| {
                let gx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                    .collect();
                vec![Some(gx)]
            },
        ))
    }

    /// Stride-1 max pooling with `kernel / 2` padding, so spatial size is preserved.
    /// Gradient goes to the first maximal element of each window.
    pub fn max_pool2d_same(&self, kernel: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = dims4("max_pool2d", self)?;
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "max_pool2d kernel must be odd, got {kernel}"
            )));
        }
        let r = (kernel / 2) as isize;
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        let mut arg = vec![0usize; x.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h as isize {
                for xo in 0..w as isize {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                        for xx in (xo - r).max(0)..(xo + r + 1).min(w as isize) {
                            let i = base + yy as usize * w + xx as usize;
                            if x[i] > best {
                                best = x[i];
                                at = i;
                            }
                        }
                    }
                    let o = base + y as usize * w + xo as usize;
                    out[o] = best;
                    arg[o] = at;
                }
            }
        }
        let len = x.len();
        Ok(Tensor::from_op(
            "max_pool2d",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![T::zero(); len];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            },
        ))
    }
}
