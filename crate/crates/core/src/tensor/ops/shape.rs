use std::sync::Arc;

use super::reduce::{axis_split, check_axis};
use crate::error::{Error, Result};
use crate::tensor::{numel_of, Scalar, Tensor};

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |_, g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let in_strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.dim(p)).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        // src[k] = input offset of output element k
        let n = self.numel();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            src.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let x = self.data();
        let data = src.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![T::zero(); n];
                for (k, &i) in src.iter().enumerate() {
                    gx[i] = g[k];
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Joins tensors along `axis`; every other extent must agree.
    pub fn concat(inputs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        check_axis("concat", first.shape(), axis)?;
        for t in inputs {
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "extent mismatch off axis {axis}: {:?} vs {:?}",
                        t.shape(),
                        first.shape()
                    ),
                ));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = inputs.iter().map(|t| t.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &len) in inputs.iter().zip(&lens) {
                data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            inputs.to_vec(),
            move |_, g| {
                let mut grads: Vec<Vec<T>> = lens
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gi, &len) in grads.iter_mut().zip(&lens) {
                        gi.extend_from_slice(&g[pos..pos + len * inner]);
                        pos += len * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        ))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis("narrow", self.shape(), axis)?;
        if len == 0 || start + len > self.dim(axis) {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {start}..{} outside extent {} of axis {axis}",
                    start + len,
                    self.dim(axis)
                ),
            ));
        }
        let (outer, full, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Gathers rows (axis 0) by index; repeated indices accumulate gradient.
    pub fn index_select(&self, rows: &[usize]) -> Result<Tensor<T>> {
        let n = self.dim(0);
        if rows.is_empty() {
            return Err(Error::shape("index_select", "empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(
                "index_select",
                format!("row {bad} out of range for extent {n}"),
            ));
        }
        let width = self.numel() / n;
        let x = self.data();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        let rows: Arc<[usize]> = rows.into();
        let total = self.numel();
        Ok(Tensor::from_op(
            "index_select",
            shape,
            data,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![T::zero(); total];
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut gx[r * width..(r + 1) * width];
                    dst.iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                        .for_each(|(d, &s)| *d += s);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]`: each pixel becomes a `scale x scale` block.
    pub fn upsample_nearest(&self, scale: usize) -> Result<Tensor<T>> {
        if scale < 1 {
            return Err(Error::InvalidArgument(format!(
                "upsample scale must be >= 1, got {scale}"
            )));
        }
        if self.rank() != 4 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("expected [N,C,H,W], got {:?}", self.shape()),
            ));
        }
        let (nc, h, w) = (self.dim(0) * self.dim(1), self.dim(2), self.dim(3));
        let (oh, ow) = (h * scale, w * scale);
        let x = self.data();
        let mut data = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            for y in 0..oh {
                let row = &x[(p * h + y / scale) * w..(p * h + y / scale + 1) * w];
                for xo in 0..ow {
                    data.push(row[xo / scale]);
                }
            }
        }
        let shape = vec![self.dim(0), self.dim(1), oh, ow];
        Ok(Tensor::from_op(
            "upsample_nearest",
            shape,
            data,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..oh {
                        for xo in 0..ow {
                            gx[(p * h + y / scale) * w + xo / scale] += g[(p * oh + y) * ow + xo];
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}
