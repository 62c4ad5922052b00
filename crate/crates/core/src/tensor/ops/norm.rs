use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean with one refinement pass, exact for constant data.
fn refined_mean<T: Scalar>(xs: &[T]) -> T {
    let m = T::lit(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / m;
    mean + xs.iter().map(|&v| v - mean).sum::<T>() / m
}

fn check_affine<T: Scalar>(
    op: &'static str,
    c: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!(
                "gamma {:?} and beta {:?} must both be [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

/// Mutable running statistics for batch normalization.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
    pub momentum: f64,
}

impl<T: Scalar> Tensor<T> {
    /// Group normalization over `[N, C, ...]` with biased variance, then per-channel affine.
    pub fn group_norm(
        &self,
        num_groups: usize,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(Error::shape(
                "group_norm",
                format!("expected [N, C, ...], got {:?}", self.shape()),
            ));
        }
        let (n, c) = (self.dim(0), self.dim(1));
        if num_groups == 0 || c % num_groups != 0 {
            return Err(Error::InvalidGroups {
                channels: c,
                groups: num_groups,
            });
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "eps must be > 0, got {eps}"
            )));
        }
        check_affine("group_norm", c, gamma, beta)?;
        let spatial = self.numel() / (n * c);
        let cg = c / num_groups;
        let block = cg * spatial;
        let x = self.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv = vec![T::zero(); n * num_groups];
        for (b, (xs, hs)) in x.chunks(block).zip(xhat.chunks_mut(block)).enumerate() {
            let m = T::lit(block as f64);
            let mean = refined_mean(xs);
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let iv = T::one() / (var + T::lit(eps)).sqrt();
            inv[b] = iv;
            hs.iter_mut()
                .zip(xs)
                .for_each(|(h, &v)| *h = (v - mean) * iv);
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let mut out = vec![T::zero(); x.len()];
        for (k, (o, h)) in out
            .chunks_mut(spatial)
            .zip(xhat.chunks(spatial))
            .enumerate()
        {
            let ch = k % c;
            o.iter_mut()
                .zip(h)
                .for_each(|(o, &h)| *o = h * gd[ch] + bd[ch]);
        }
        let xhat = Arc::new(xhat);
        let gm = gamma.clone();
        Ok(Tensor::from_op(
            "group_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |_, g| {
                let gd = gm.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); g.len()];
                for (k, ((gs, hs), ds)) in g
                    .chunks(spatial)
                    .zip(xhat.chunks(spatial))
                    .zip(dxhat.chunks_mut(spatial))
                    .enumerate()
                {
                    let ch = k % c;
                    for i in 0..spatial {
                        dgamma[ch] += gs[i] * hs[i];
                        dbeta[ch] += gs[i];
                        ds[i] = gs[i] * gd[ch];
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                let m = T::lit(block as f64);
                for (b, ((dxs, ds), hs)) in dx
                    .chunks_mut(block)
                    .zip(dxhat.chunks(block))
                    .zip(xhat.chunks(block))
                    .enumerate()
                {
                    let mean_d = ds.iter().copied().sum::<T>() / m;
                    let mean_dh = ds.iter().zip(hs).map(|(&d, &h)| d * h).sum::<T>() / m;
                    for i in 0..block {
                        dxs[i] = inv[b] * (ds[i] - mean_d - hs[i] * mean_dh);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        ))
    }

    /// Batch normalization over `[N, C, ...]`.
    ///
    /// In training mode the batch's biased statistics normalize the input and the running
    /// statistics move toward the batch mean and unbiased variance by `momentum`. In inference
    /// mode the running statistics are used as-is.
    pub fn batch_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running: RunningStats<'_, T>,
        eps: f64,
        training: bool,
    ) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected [N, C, ...], got {:?}", self.shape()),
            ));
        }
        let (n, c) = (self.dim(0), self.dim(1));
        check_affine("batch_norm", c, gamma, beta)?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running statistics must have {c} entries"),
            ));
        }
        let spatial = if n * c == 0 {
            0
        } else {
            self.numel() / (n * c)
        };
        let count = n * spatial;
        if count == 0 {
            return Err(Error::InvalidInput("batch_norm on an empty batch".into()));
        }
        let x = self.data();
        let (mean, inv): (Vec<T>, Vec<T>) = if training {
            let m = T::lit(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for (k, p) in x.chunks(spatial).enumerate() {
                mean[k % c] += p.iter().copied().sum::<T>();
            }
            mean.iter_mut().for_each(|v| *v /= m);
            let mut fix = vec![T::zero(); c];
            for (k, p) in x.chunks(spatial).enumerate() {
                fix[k % c] += p.iter().map(|&v| v - mean[k % c]).sum::<T>();
            }
            mean.iter_mut().zip(&fix).for_each(|(v, &f)| *v += f / m);
            for (k, p) in x.chunks(spatial).enumerate() {
                let mu = mean[k % c];
                var[k % c] += p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            var.iter_mut().for_each(|v| *v /= m);
            let mom = T::lit(running.momentum);
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * mean[ch];
                running.var[ch] = (T::one() - mom) * running.var[ch] + mom * var[ch] * unbias;
            }
            let inv = var
                .iter()
                .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
                .collect();
            (mean, inv)
        } else {
            let inv = running
                .var
                .iter()
                .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
                .collect();
            (running.mean.to_vec(), inv)
        };
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let (gd, bd) = (gamma.data(), beta.data());
        for (k, ((p, h), o)) in x
            .chunks(spatial)
            .zip(xhat.chunks_mut(spatial))
            .zip(out.chunks_mut(spatial))
            .enumerate()
        {
            let ch = k % c;
            for i in 0..spatial {
                h[i] = (p[i] - mean[ch]) * inv[ch];
                o[i] = h[i] * gd[ch] + bd[ch];
            }
        }
        let xhat = Arc::new(xhat);
        let gm = gamma.clone();
        Ok(Tensor::from_op(
            "batch_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |_, g| {
                let gd = gm.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (k, (gs, hs)) in g.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                    let ch = k % c;
                    for i in 0..spatial {
                        dgamma[ch] += gs[i] * hs[i];
                        dbeta[ch] += gs[i];
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                let m = T::lit(count as f64);
                for (k, ((dxs, gs), hs)) in dx
                    .chunks_mut(spatial)
                    .zip(g.chunks(spatial))
                    .zip(xhat.chunks(spatial))
                    .enumerate()
                {
                    let ch = k % c;
                    let scale = gd[ch] * inv[ch];
                    if training {
                        // d/dx of normalized output with batch statistics
                        let mean_d = dbeta[ch] / m;
                        let mean_dh = dgamma[ch] / m;
                        for i in 0..spatial {
                            dxs[i] = scale * (gs[i] - mean_d - hs[i] * mean_dh);
                        }
                    } else {
                        for i in 0..spatial {
                            dxs[i] = scale * gs[i];
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        ))
    }
}
